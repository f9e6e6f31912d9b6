#pragma once

#include "ava/common.hpp"

#include <nlohmann/json.hpp>

#include <random>

namespace ava {

enum class Activation : uint8_t { Relu, Tanh, Identity };

inline const char* activation_name(Activation a) {
    switch (a) {
        case Activation::Relu: return "relu";
        case Activation::Tanh: return "tanh";
        case Activation::Identity: return "identity";
    }
    return "?";
}

inline Activation activation_from_name(const std::string& s) {
    if (s == "relu") return Activation::Relu;
    if (s == "tanh") return Activation::Tanh;
    if (s == "identity") return Activation::Identity;
    throw ValidationError("unknown activation: " + s);
}

// Sinusoidal positional encoding, NeRF style.
struct PosEncoding {
    int num_frequencies = 4;
    bool include_input = true;

    int output_dim(int input_dim) const {
        return input_dim * ((include_input ? 1 : 0) + 2 * num_frequencies);
    }
};

inline VecX pos_encode(const Vec3& x, const PosEncoding& enc) {
    require(enc.num_frequencies >= 0, "pos_encode: L must be >= 0");
    VecX out(enc.output_dim(3));
    int idx = 0;
    if (enc.include_input)
        for (int i = 0; i < 3; ++i) out(idx++) = x(i);
    for (int j = 0; j < enc.num_frequencies; ++j) {
        double f = std::ldexp(M_PI, j);  // 2^j * pi
        for (int i = 0; i < 3; ++i) out(idx++) = std::sin(f * x(i));
        for (int i = 0; i < 3; ++i) out(idx++) = std::cos(f * x(i));
    }
    return out;
}

// d(encoding)/dx applied to an upstream gradient.
inline Vec3 pos_encode_backward(const Vec3& x, const PosEncoding& enc, const VecX& dout) {
    Vec3 dx = Vec3::Zero();
    int idx = 0;
    if (enc.include_input)
        for (int i = 0; i < 3; ++i) dx(i) += dout(idx++);
    for (int j = 0; j < enc.num_frequencies; ++j) {
        double f = std::ldexp(M_PI, j);
        for (int i = 0; i < 3; ++i) dx(i) += dout(idx++) * f * std::cos(f * x(i));
        for (int i = 0; i < 3; ++i) dx(i) -= dout(idx++) * f * std::sin(f * x(i));
    }
    return dx;
}

// Small fully connected net with exact analytic backward.
struct Mlp {
    struct Layer {
        MatX weight;  // out x in
        VecX bias;
        Activation act = Activation::Identity;
    };
    std::vector<Layer> layers;

    int input_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.front().weight.cols()); }
    int output_dim() const { return layers.empty() ? 0 : static_cast<int>(layers.back().weight.rows()); }

    size_t parameter_count() const {
        size_t n = 0;
        for (const auto& l : layers) n += l.weight.size() + l.bias.size();
        return n;
    }

    void validate() const {
        for (size_t i = 0; i + 1 < layers.size(); ++i)
            require(layers[i].weight.rows() == layers[i + 1].weight.cols(),
                    "mlp: layer " + std::to_string(i) + " output dim mismatch");
        for (const auto& l : layers) {
            require(l.weight.allFinite() && l.bias.allFinite(), "mlp: non-finite parameters");
            require(l.bias.size() == l.weight.rows(), "mlp: bias length mismatch");
        }
    }

    // He-style init for hidden layers; optionally zeros the final layer so the
    // net starts as the constant zero map.
    static Mlp make(const std::vector<int>& widths, Activation hidden_act, uint64_t seed,
                    bool zero_init_last = false) {
        require(widths.size() >= 2, "mlp: need at least input and output widths");
        std::mt19937_64 rng(seed);
        std::normal_distribution<double> gauss(0.0, 1.0);
        Mlp m;
        for (size_t i = 0; i + 1 < widths.size(); ++i) {
            Layer l;
            const int in = widths[i], out = widths[i + 1];
            l.weight.resize(out, in);
            double scale = std::sqrt(2.0 / in);
            for (int r = 0; r < out; ++r)
                for (int c = 0; c < in; ++c) l.weight(r, c) = scale * gauss(rng);
            l.bias = VecX::Zero(out);
            bool last = (i + 2 == widths.size());
            l.act = last ? Activation::Identity : hidden_act;
            if (last && zero_init_last) l.weight.setZero();
            m.layers.push_back(std::move(l));
        }
        return m;
    }
};

struct MlpCache {
    std::vector<VecX> pre;   // pre-activation per layer
    std::vector<VecX> post;  // post-activation per layer (post.back() = output)
    VecX input;
};

inline VecX apply_activation(Activation a, const VecX& z) {
    switch (a) {
        case Activation::Relu: return z.cwiseMax(0.0);
        case Activation::Tanh: return z.array().tanh().matrix();
        case Activation::Identity: return z;
    }
    return z;
}

inline VecX activation_grad(Activation a, const VecX& z, const VecX& post, const VecX& dpost) {
    switch (a) {
        case Activation::Relu: {
            VecX g = dpost;
            for (int i = 0; i < z.size(); ++i)
                if (z(i) <= 0.0) g(i) = 0.0;
            return g;
        }
        case Activation::Tanh:
            return (dpost.array() * (1.0 - post.array().square())).matrix();
        case Activation::Identity: return dpost;
    }
    return dpost;
}

inline VecX mlp_forward(const Mlp& mlp, const VecX& input, MlpCache* cache = nullptr) {
    require(input.size() == mlp.input_dim(), "mlp_forward: input dim " +
                std::to_string(input.size()) + " != " + std::to_string(mlp.input_dim()));
    VecX x = input;
    if (cache) {
        cache->input = input;
        cache->pre.clear();
        cache->post.clear();
    }
    for (const auto& l : mlp.layers) {
        VecX z = l.weight * x + l.bias;
        x = apply_activation(l.act, z);
        if (cache) {
            cache->pre.push_back(z);
            cache->post.push_back(x);
        }
    }
    return x;
}

struct MlpGrads {
    std::vector<MatX> dweight;
    std::vector<VecX> dbias;

    static MlpGrads zeros_like(const Mlp& mlp) {
        MlpGrads g;
        for (const auto& l : mlp.layers) {
            g.dweight.push_back(MatX::Zero(l.weight.rows(), l.weight.cols()));
            g.dbias.push_back(VecX::Zero(l.bias.size()));
        }
        return g;
    }

    void accumulate(const MlpGrads& other) {
        for (size_t i = 0; i < dweight.size(); ++i) {
            dweight[i] += other.dweight[i];
            dbias[i] += other.dbias[i];
        }
    }
};

// Exact reverse pass; accumulates parameter grads into `grads` and returns the
// input gradient.
inline VecX mlp_backward(const Mlp& mlp, const MlpCache& cache, const VecX& output_grad,
                         MlpGrads& grads) {
    require(cache.post.size() == mlp.layers.size(), "mlp_backward: stale cache");
    VecX d = output_grad;
    for (int i = static_cast<int>(mlp.layers.size()) - 1; i >= 0; --i) {
        const auto& l = mlp.layers[i];
        VecX dz = activation_grad(l.act, cache.pre[i], cache.post[i], d);
        const VecX& in = (i == 0) ? cache.input : cache.post[i - 1];
        grads.dweight[i] += dz * in.transpose();
        grads.dbias[i] += dz;
        d = l.weight.transpose() * dz;
    }
    return d;
}

inline nlohmann::json mlp_to_json(const Mlp& mlp) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& l : mlp.layers) {
        nlohmann::json lj;
        nlohmann::json w = nlohmann::json::array();
        for (int r = 0; r < l.weight.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (int c = 0; c < l.weight.cols(); ++c) row.push_back(l.weight(r, c));
            w.push_back(row);
        }
        lj["weight"] = w;
        lj["bias"] = std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size());
        lj["activation"] = activation_name(l.act);
        j.push_back(lj);
    }
    return j;
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
    Mlp m;
    for (const auto& lj : j) {
        Mlp::Layer l;
        const auto& w = lj["weight"];
        size_t rows = w.size();
        size_t cols = rows ? w[0].size() : 0;
        l.weight.resize(rows, cols);
        for (size_t r = 0; r < rows; ++r)
            for (size_t c = 0; c < cols; ++c) l.weight(r, c) = w[r][c].get<double>();
        const auto& b = lj["bias"];
        l.bias.resize(b.size());
        for (size_t i = 0; i < b.size(); ++i) l.bias(i) = b[i].get<double>();
        l.act = activation_from_name(lj["activation"].get<std::string>());
        m.layers.push_back(std::move(l));
    }
    m.validate();
    return m;
}

}  // namespace ava

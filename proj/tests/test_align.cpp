#include "ava/align.hpp"

#include "ava/lbfgs.hpp"
#include "fit_scenarios.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <random>

using namespace ava;

TEST_CASE("geman-mcclure penalty values") {
    VecX zero = VecX::Zero(2);
    CHECK(geman_mcclure(zero, 1.0) == 0.0);

    // ||r|| = rho gives exactly rho^2 / 2
    VecX r(2);
    r << 3.0, 4.0;  // norm 5
    CHECK(geman_mcclure(r, 5.0) == Catch::Approx(12.5).margin(1e-12));

    // saturates at rho^2
    VecX big(1);
    big << 1e6;
    CHECK(geman_mcclure(big, 2.0) < 4.0);
    CHECK(geman_mcclure(big, 2.0) == Catch::Approx(4.0).margin(1e-6));

    // monotone in the residual norm
    double prev = -1.0;
    for (double s = 0.0; s < 10.0; s += 0.25) {
        VecX v(1);
        v << s;
        double val = geman_mcclure(v, 1.5);
        CHECK(val >= prev);
        prev = val;
    }
    CHECK_THROWS_AS(geman_mcclure(zero, 0.0), ValidationError);
}

TEST_CASE("geman-mcclure gradient agrees with finite differences") {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double rho : {0.1, 1.0, 100.0}) {
        VecX r(3);
        for (int i = 0; i < 3; ++i) r(i) = rho * gauss(rng);
        VecX g = geman_mcclure_grad(r, rho);
        const double h = 1e-6 * std::max(1.0, rho);
        for (int i = 0; i < 3; ++i) {
            VecX rp = r, rm = r;
            rp(i) += h;
            rm(i) -= h;
            double fd = (geman_mcclure(rp, rho) - geman_mcclure(rm, rho)) / (2 * h);
            CHECK(g(i) == Catch::Approx(fd).epsilon(1e-5).margin(1e-9));
        }
    }
}

TEST_CASE("2d loss vanishes for exact reprojections and ignores zero confidence") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    Camera cam = fitscn::marker_camera();
    const int K = asset.joint_count();
    MatX posed(K, 3);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> uni(-0.3, 0.3);
    for (int k = 0; k < K; ++k) posed.row(k) = Eigen::RowVector3d(uni(rng), uni(rng), 2.0 + uni(rng));

    FrameDetections det;
    det.camera = cam;
    for (int k = 0; k < K; ++k) {
        Keypoint2d kp;
        kp.u = cam.fx * posed(k, 0) / posed(k, 2) + cam.cx;
        kp.v = cam.fy * posed(k, 1) / posed(k, 2) + cam.cy;
        kp.confidence = 1.0;
        det.keypoints2d.push_back(kp);
    }
    std::vector<double> gamma(K, 1.0);
    CHECK(loss_2d(posed, det, gamma, 100.0) == Catch::Approx(0.0).margin(1e-18));

    // a wildly wrong keypoint with zero confidence changes nothing
    det.keypoints2d[3].u += 500.0;
    det.keypoints2d[3].confidence = 0.0;
    CHECK(loss_2d(posed, det, gamma, 100.0) == Catch::Approx(0.0).margin(1e-18));

    // and per-joint gamma scales the term linearly
    det.keypoints2d[5].u += 10.0;
    double base = loss_2d(posed, det, gamma, 100.0);
    gamma[5] = 2.0;
    CHECK(loss_2d(posed, det, gamma, 100.0) == Catch::Approx(2.0 * base).margin(1e-12));
}

TEST_CASE("2d loss excludes and counts joints behind the camera") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    const int K = asset.joint_count();
    MatX posed = MatX::Zero(K, 3);
    posed.col(2).setConstant(2.0);
    posed(4, 2) = -1.0;
    posed(7, 2) = 0.0;
    FrameDetections det;
    det.camera = fitscn::marker_camera();
    for (int k = 0; k < K; ++k) det.keypoints2d.push_back({300.0, 300.0, 1.0});
    std::vector<double> gamma(K, 1.0);
    int behind = 0;
    double val = loss_2d(posed, det, gamma, 100.0, nullptr, &behind);
    CHECK(behind == 2);
    CHECK(std::isfinite(val));
}

TEST_CASE("2d loss gradient agrees with finite differences") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    const int K = asset.joint_count();
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(-0.3, 0.3);
    MatX posed(K, 3);
    for (int k = 0; k < K; ++k) posed.row(k) = Eigen::RowVector3d(uni(rng), uni(rng), 2.0 + uni(rng));
    FrameDetections det;
    det.camera = fitscn::marker_camera();
    std::uniform_real_distribution<double> upix(100.0, 400.0);
    for (int k = 0; k < K; ++k) det.keypoints2d.push_back({upix(rng), upix(rng), 0.5 + 0.5 * uni(rng)});
    std::vector<double> gamma(K, 1.3);

    MatX dposed = MatX::Zero(K, 3);
    loss_2d(posed, det, gamma, 100.0, &dposed);
    const double h = 1e-6;
    for (int k = 0; k < K; k += 3)
        for (int c = 0; c < 3; ++c) {
            MatX pp = posed, pm = posed;
            pp(k, c) += h;
            pm(k, c) -= h;
            double fd = (loss_2d(pp, det, gamma, 100.0) - loss_2d(pm, det, gamma, 100.0)) / (2 * h);
            CHECK(dposed(k, c) == Catch::Approx(fd).epsilon(1e-4).margin(1e-6));
        }
}

TEST_CASE("body prior reduces to the embedding regularizer at zero residual") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    auto parts = joint_parts(asset);
    std::vector<int> body;
    for (int k = 0; k < asset.joint_count(); ++k)
        if (asset.parents[k] != kNoParent && parts[k] == Part::Body) body.push_back(k);
    MatX posed = MatX::Random(asset.joint_count(), 3);
    MatX targets(body.size(), 3);
    for (size_t i = 0; i < body.size(); ++i) targets.row(i) = posed.row(body[i]);

    VecX eta = VecX::Zero(4);
    CHECK(loss_body_prior(posed, body, targets, eta, 0.1) == 0.0);
    eta << 0.5, -0.5, 1.0, 0.0;
    VecX deta = VecX::Zero(4);
    double val = loss_body_prior(posed, body, targets, eta, 0.1, nullptr, &deta);
    CHECK(val == Catch::Approx(eta.squaredNorm()).margin(1e-14));
    CHECK((deta - 2.0 * eta).norm() < 1e-14);
}

TEST_CASE("body prior gradient agrees with finite differences") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    auto parts = joint_parts(asset);
    std::vector<int> body;
    for (int k = 0; k < asset.joint_count(); ++k)
        if (asset.parents[k] != kNoParent && parts[k] == Part::Body) body.push_back(k);
    std::mt19937_64 rng(6);
    std::normal_distribution<double> gauss(0.0, 0.1);
    MatX posed = MatX::Random(asset.joint_count(), 3);
    MatX targets(body.size(), 3);
    for (size_t i = 0; i < body.size(); ++i)
        targets.row(i) = posed.row(body[i]) + Eigen::RowVector3d(gauss(rng), gauss(rng), gauss(rng));
    VecX eta(3);
    eta << 0.2, -0.1, 0.4;

    MatX dposed = MatX::Zero(asset.joint_count(), 3);
    VecX deta = VecX::Zero(3);
    loss_body_prior(posed, body, targets, eta, 0.1, &dposed, &deta);
    const double h = 1e-7;
    for (size_t i = 0; i < body.size(); i += 4)
        for (int c = 0; c < 3; ++c) {
            MatX pp = posed, pm = posed;
            pp(body[i], c) += h;
            pm(body[i], c) -= h;
            double fd = (loss_body_prior(pp, body, targets, eta, 0.1) -
                         loss_body_prior(pm, body, targets, eta, 0.1)) /
                        (2 * h);
            CHECK(dposed(body[i], c) == Catch::Approx(fd).epsilon(1e-4).margin(1e-6));
        }
}

TEST_CASE("hand prior penalizes only depth") {
    MatX posed(2, 3);
    posed << 0.3, 0.2, 2.0,
             0.1, 0.4, 2.1;
    MatX targets = posed;
    targets(0, 0) += 5.0;  // x displacement: invisible to the term
    targets(0, 1) -= 3.0;
    std::vector<int> hand = {0, 1};
    CHECK(loss_hand_prior(posed, hand, targets, 0.1) == 0.0);

    targets(1, 2) += 0.05;
    VecX r(1);
    r << -0.05;
    CHECK(loss_hand_prior(posed, hand, targets, 0.1) ==
          Catch::Approx(geman_mcclure(r, 0.1)).margin(1e-14));

    MatX dposed = MatX::Zero(2, 3);
    loss_hand_prior(posed, hand, targets, 0.1, &dposed);
    CHECK(dposed.col(0).norm() == 0.0);
    CHECK(dposed.col(1).norm() == 0.0);
    const double h = 1e-7;
    MatX pp = posed, pm = posed;
    pp(1, 2) += h;
    pm(1, 2) -= h;
    double fd = (loss_hand_prior(pp, hand, targets, 0.1) -
                 loss_hand_prior(pm, hand, targets, 0.1)) / (2 * h);
    CHECK(dposed(1, 2) == Catch::Approx(fd).epsilon(1e-5).margin(1e-9));
}

TEST_CASE("lbfgs solves a quadratic to the linear-solve answer") {
    const int n = 6;
    std::mt19937_64 rng(7);
    std::normal_distribution<double> gauss(0.0, 1.0);
    MatX B(n, n);
    for (int r = 0; r < n; ++r)
        for (int c = 0; c < n; ++c) B(r, c) = gauss(rng);
    MatX A = B * B.transpose() + MatX::Identity(n, n);
    VecX b(n);
    for (int i = 0; i < n; ++i) b(i) = gauss(rng);

    Objective f = [&](const VecX& x, VecX& g) {
        g = A * x - b;
        return 0.5 * x.dot(A * x) - b.dot(x);
    };
    LbfgsOptions opt;
    opt.gradient_tolerance = 1e-9;
    opt.max_iterations = 500;
    LbfgsResult res = lbfgs_minimize(f, VecX::Zero(n), opt);
    VecX exact = A.ldlt().solve(b);
    // A >= I, so |x - exact| = |A^-1 g| <= |g|_2 <= sqrt(n) * tol
    CHECK((res.x - exact).norm() < std::sqrt(6.0) * 1e-9);
    CHECK(res.status == LbfgsStatus::Converged);
}

TEST_CASE("lbfgs minimizes rosenbrock with strong wolfe steps throughout") {
    Objective rosen = [](const VecX& x, VecX& g) {
        double a = 1.0 - x(0);
        double b = x(1) - x(0) * x(0);
        g.resize(2);
        g(0) = -2.0 * a - 400.0 * x(0) * b;
        g(1) = 200.0 * b;
        return a * a + 100.0 * b * b;
    };
    VecX x0(2);
    x0 << -1.2, 1.0;
    LbfgsOptions opt;
    opt.max_iterations = 200;
    int steps = 0;
    auto on_step = [&](double f0, double g0, double alpha, double fa, double ga) {
        ++steps;
        CHECK(g0 < 0.0);  // descent direction
        CHECK(fa <= f0 + opt.c1 * alpha * g0 + 1e-15);        // sufficient decrease
        CHECK(std::abs(ga) <= opt.c2 * std::abs(g0) + 1e-15); // curvature
    };
    LbfgsResult res = lbfgs_minimize(rosen, x0, opt, on_step);
    CHECK(res.value < 1e-10);
    CHECK(res.iterations <= 200);
    CHECK(steps == res.iterations);
    // value history is non-increasing
    for (size_t i = 1; i < res.value_history.size(); ++i)
        CHECK(res.value_history[i] <= res.value_history[i - 1] + 1e-15);
}

TEST_CASE("linear prior decoder is consistent and rest-centered") {
    PriorDecoder p = make_linear_prior(16, 8);
    CHECK(p.decode(VecX::Zero(8)).norm() == 0.0);
    VecX eta = VecX::Random(8);
    VecX out = p.decode(eta);
    REQUIRE(out.size() == 48);
    CHECK((p.jacobian(eta) * eta - out).norm() < 1e-12);
    // deterministic
    PriorDecoder q = make_linear_prior(16, 8);
    CHECK((q.decode(eta) - out).norm() == 0.0);
}

TEST_CASE("detections json round trip") {
    FrameDetections d;
    d.camera = fitscn::marker_camera();
    d.keypoints2d = {{10.5, 20.25, 1.0}, {30.0, 40.0, 0.5}, {0.0, 0.0, 0.0}};
    MatX body(2, 3);
    body << 0.1, 0.2, 2.0, -0.1, 0.3, 2.1;
    d.body_joints3d = body;
    FrameDetections back = detections_from_json(detections_to_json(d));
    REQUIRE(back.keypoints2d.size() == 3);
    CHECK(back.keypoints2d[0].u == 10.5);
    CHECK(back.keypoints2d[1].confidence == 0.5);
    REQUIRE(back.body_joints3d.has_value());
    CHECK((*back.body_joints3d - body).norm() == 0.0);
    CHECK_FALSE(back.hand_joints3d.has_value());
    CHECK(back.camera.fx == d.camera.fx);

    nlohmann::json bad = detections_to_json(d);
    bad["keypoints2d"][0][2] = 1.5;  // out-of-range confidence
    CHECK_THROWS_AS(detections_from_json(bad), ValidationError);
}

TEST_CASE("pose json round trip") {
    MatX theta = MatX::Random(5, 3);
    VecX beta = VecX::Random(2), psi = VecX::Random(1);
    Vec3 t(0.1, -0.2, 2.0);
    MatX theta2;
    VecX beta2, psi2;
    Vec3 t2;
    pose_from_json(pose_to_json(theta, beta, psi, t), theta2, beta2, psi2, t2);
    CHECK((theta - theta2).norm() == 0.0);
    CHECK((beta - beta2).norm() == 0.0);
    CHECK((psi - psi2).norm() == 0.0);
    CHECK((t - t2).norm() == 0.0);
}

TEST_CASE("joint parts follow the dominant skinning vertex") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    auto parts = joint_parts(asset);
    int hands = 0, faces = 0;
    for (Part p : parts) {
        if (p == Part::Hand) ++hands;
        if (p == Part::Face) ++faces;
    }
    CHECK(hands == 2);
    CHECK(faces == 1);
}

TEST_CASE("fit recovers poses from noisy detections") {
    BodyModelAsset asset = fitscn::make_marker_rig(24);
    std::vector<FrameDetections> dets;
    fitscn::RecoveryTruth truth =
        fitscn::make_recovery_detections(asset, 4, /*noise_px=*/1.0, /*seed=*/303, dets);
    FitConfig cfg;
    // the 2d term is in px^2 while the 3d prior is in model units^2; one unit
    // spans about 410 px at this depth, so lambda_bp ~ 410^2 trusts the
    // noiseless 3d targets on par with the noisy keypoints. Later stages get
    // enough iterations to converge the soft directions of the stiff problem.
    cfg.stages = {{60, 1e6, 0.0, 1.0}, {200, 5e5, 1.0, 1.0}, {200, 2e5, 1.0, 2.0}};
    PriorDecoder prior = make_linear_prior(24, cfg.embedding_dim);
    FitResult fit = fit_sequence(dets, asset, cfg, prior);

    fitscn::RecoveryErrors err = fitscn::recovery_errors(asset, truth, fit);
    CHECK(err.mean_2d < 0.5);
    CHECK(err.mean_3d < 1e-2);

    // every stage's objective trace is non-increasing
    REQUIRE(fit.report.stage_objectives.size() == 3);
    for (const auto& hist : fit.report.stage_objectives)
        for (size_t i = 1; i < hist.size(); ++i) CHECK(hist[i] <= hist[i - 1] + 1e-12);
    CHECK(fit.report.skipped_frames.empty());
}

TEST_CASE("frames without detections are skipped and reported") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    std::vector<FrameDetections> dets;
    fitscn::make_recovery_detections(asset, 3, 1.0, 404, dets);
    FrameDetections empty;
    empty.camera = fitscn::marker_camera();
    for (int k = 0; k < asset.joint_count(); ++k) empty.keypoints2d.push_back({0, 0, 0.0});
    dets.insert(dets.begin() + 1, empty);

    FitConfig cfg;
    PriorDecoder prior = make_linear_prior(16, cfg.embedding_dim);
    FitResult fit = fit_sequence(dets, asset, cfg, prior);
    REQUIRE(fit.report.skipped_frames.size() == 1);
    CHECK(fit.report.skipped_frames[0] == 1);
    CHECK(fit.frames[1].skipped);
    CHECK_FALSE(fit.frames[0].skipped);
}

TEST_CASE("hand prior recovers depth the 2d term cannot see") {
    BodyModelAsset asset = fitscn::make_marker_rig(16);
    std::vector<FrameDetections> dets;
    fitscn::AmbiguityTruth truth = fitscn::make_ambiguity_detections(asset, dets);

    FitConfig with_prior;
    with_prior.stages = {{60, 1.0, 0.0, 1.0}, {200, 0.5, 1.0, 1.0}, {200, 0.2, 1.0, 2.0}};
    PriorDecoder prior = make_linear_prior(16, with_prior.embedding_dim);
    FitResult fit_with = fit_sequence(dets, asset, with_prior, prior);

    FitConfig without_prior = with_prior;
    for (auto& s : without_prior.stages) s.lambda_hp = 0.0;
    FitResult fit_without = fit_sequence(dets, asset, without_prior, prior);

    double err_with = fitscn::hand_z_error(asset, truth, fit_with);
    double err_without = fitscn::hand_z_error(asset, truth, fit_without);
    CHECK(err_without > 0.05);             // the bend is invisible in 2d
    CHECK(err_with < 0.5 * err_without);   // the depth prior resolves it
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "csmri/losses.hpp"
#include "test_util.hpp"

using namespace csmri;

TEST_CASE("mse loss") {
  Tensor<double> x({2}, std::vector<double>{0.0, 0.0});
  Tensor<double> y({2}, std::vector<double>{1.0, 1.0});
  CHECK(mse_loss(x, x).item() == 0.0);
  CHECK(mse_loss(x, y).item() == doctest::Approx(1.0));

  // Homogeneity: scaling both inputs by c scales the loss by c^2.
  RngStream rng(3);
  Tensor<double> a = testutil::random_tensor({8}, rng);
  Tensor<double> b = testutil::random_tensor({8}, rng);
  const double base = mse_loss(a, b).item();
  Tensor<double> a3 = mul_scalar(a, 3.0), b3 = mul_scalar(b, 3.0);
  CHECK(mse_loss(a3, b3).item() == doctest::Approx(9.0 * base));

  Tensor<double> wrong({3});
  CHECK_THROWS_AS(mse_loss(x, wrong), ShapeError);
}

TEST_CASE("perceptual loss") {
  RngStream rng(4);
  FeatureExtractor<double> extractor(feature_extractor_preset("desk"));
  Tensor<double> x = testutil::random_tensor({1, 2, 16, 16}, rng);
  Tensor<double> y = testutil::random_tensor({1, 2, 16, 16}, rng);

  CHECK(perceptual_loss(x, x, extractor).item() == 0.0);
  CHECK(perceptual_loss(x, y, extractor).item() ==
        doctest::Approx(perceptual_loss(y, x, extractor).item()));

  // Compositional oracle: extract both, subtract, square, mean.
  Tensor<double> fx = extractor.forward(x);
  Tensor<double> fy = extractor.forward(y);
  double want = 0.0;
  for (size_t i = 0; i < fx.numel(); ++i) {
    const double d = fx.data()[i] - fy.data()[i];
    want += d * d;
  }
  want /= static_cast<double>(fx.numel());
  CHECK(perceptual_loss(x, y, extractor).item() == doctest::Approx(want).epsilon(1e-9));
}

TEST_CASE("discriminator loss values") {
  auto scalar = [](double v) { return Tensor<double>::scalar(v); };
  CHECK(discriminator_loss(scalar(1.0), scalar(0.0), 0.0).item() ==
        doctest::Approx(2.0 * -std::log(1.0 - kProbabilityClamp)).epsilon(1e-6));
  CHECK(discriminator_loss(scalar(0.5), scalar(0.5), 0.0).item() ==
        doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-9));
  // One-sided smoothing of 0.1 at d_real = 0.9: full BCE against target 0.9.
  const double want = -(0.9 * std::log(0.9) + 0.1 * std::log(0.1));
  CHECK(discriminator_loss(scalar(0.9), scalar(1e-9), 0.1).item() ==
        doctest::Approx(want).epsilon(1e-4));
  CHECK_THROWS_AS(discriminator_loss(scalar(0.5), scalar(0.5), 1.0), ConfigError);
}

TEST_CASE("adversarial loss values and the clamp floor") {
  auto scalar = [](double v) { return Tensor<double>::scalar(v); };
  CHECK(adversarial_loss(scalar(1.0)).item() ==
        doctest::Approx(-std::log(1.0 - kProbabilityClamp)).epsilon(1e-6));
  CHECK(adversarial_loss(scalar(0.5)).item() == doctest::Approx(std::log(2.0)).epsilon(1e-9));
  const double at_floor = adversarial_loss(scalar(0.0)).item();
  CHECK(std::isfinite(at_floor));
  CHECK(at_floor == doctest::Approx(-std::log(kProbabilityClamp)).epsilon(1e-6));  // ~16.118
  CHECK(at_floor == doctest::Approx(16.118).epsilon(1e-3));
}

TEST_CASE("feature matching loss") {
  Tensor<double> a({2}, std::vector<double>{1.0, 1.0});
  Tensor<double> b({2}, std::vector<double>{0.0, 2.0});
  CHECK(feature_matching_loss<double>({a}, {a}).item() == 0.0);
  CHECK(feature_matching_loss<double>({a}, {b}).item() == doctest::Approx(1.0));

  // Appending a layer whose term equals the current mean leaves the mean.
  Tensor<double> c({2}, std::vector<double>{5.0, 5.0});
  Tensor<double> d({2}, std::vector<double>{4.0, 6.0});
  CHECK(feature_matching_loss<double>({a, c}, {b, d}).item() == doctest::Approx(1.0));

  CHECK_THROWS_AS(feature_matching_loss<double>({a}, {a, b}), ShapeError);
  Tensor<double> wrong({3});
  CHECK_THROWS_AS(feature_matching_loss<double>({a}, {wrong}), ShapeError);
}

TEST_CASE("l1 penalty") {
  Tensor<double> zero({4}, 0.0);
  CHECK(l1_penalty(zero).item() == 0.0);
  Tensor<double> x({4}, std::vector<double>{0.5, -0.5, 1.0, -1.0});
  CHECK(l1_penalty(x).item() == doctest::Approx(0.75));
  Tensor<double> neg = mul_scalar(x, -1.0);
  CHECK(l1_penalty(neg).item() == l1_penalty(x).item());
}

TEST_CASE("loss calibration") {
  SUBCASE("direct application of the rule") {
    LossCalibration c;
    c.calibrate(0.7, 0.02, 5.0, 0.4);
    CHECK(c.m() == 0.7);
    CHECK(c.n() == 0.02);
    CHECK(c.o() == 5.0);
    CHECK(c.alpha() == doctest::Approx(0.25));
    CHECK(c.frozen());
  }
  SUBCASE("unit losses give unit constants and alpha 0.1") {
    LossCalibration c;
    c.calibrate(1.0, 1.0, 1.0, 1.0);
    CHECK(c.m() == 1.0);
    CHECK(c.n() == 1.0);
    CHECK(c.o() == 1.0);
    CHECK(c.alpha() == doctest::Approx(0.1));
  }
  SUBCASE("recalibration after freeze fails") {
    LossCalibration c;
    c.calibrate(1.0, 1.0, 1.0, 1.0);
    CHECK_THROWS_AS(c.calibrate(2.0, 2.0, 2.0, 2.0), CalibrationError);
  }
  SUBCASE("non-positive first losses fail with reseed guidance") {
    LossCalibration c;
    try {
      c.calibrate(0.0, 1.0, 1.0, 1.0);
      FAIL("expected CalibrationError");
    } catch (const CalibrationError& e) {
      CHECK(std::string(e.what()).find("different seed") != std::string::npos);
    }
  }
  SUBCASE("json round trip") {
    LossCalibration c;
    c.calibrate(0.7, 0.02, 5.0, 0.4);
    LossCalibration back = LossCalibration::from_json(c.to_json());
    CHECK(back.m() == c.m());
    CHECK(back.alpha() == c.alpha());
    CHECK(back.frozen());
  }
}

TEST_CASE("total refiner loss") {
  auto scalar = [](double v) { return Tensor<double>::scalar(v); };
  LossCalibration calib;

  SUBCASE("requires a frozen calibration") {
    CHECK_THROWS_AS(
        total_refiner_loss(scalar(1.0), scalar(1.0), scalar(1.0), scalar(1.0), calib),
        ContractError);
  }

  calib.calibrate(0.7, 0.02, 5.0, 0.4);

  SUBCASE("calibration point evaluates to 2.1") {
    const double got =
        total_refiner_loss(scalar(0.7), scalar(0.02), scalar(5.0), scalar(0.4), calib).item();
    CHECK(got == doctest::Approx(2.1).epsilon(1e-9));
  }

  SUBCASE("all parts zero gives zero") {
    CHECK(total_refiner_loss(scalar(0.0), scalar(0.0), scalar(0.0), scalar(0.0), calib).item() ==
          0.0);
  }

  SUBCASE("doubling the penalty adds exactly alpha*pen") {
    const double base =
        total_refiner_loss(scalar(0.7), scalar(0.02), scalar(5.0), scalar(0.4), calib).item();
    const double doubled =
        total_refiner_loss(scalar(0.7), scalar(0.02), scalar(5.0), scalar(0.8), calib).item();
    CHECK(doubled - base == doctest::Approx(calib.alpha() * 0.4).epsilon(1e-9));
  }

  SUBCASE("gradient weights are exactly the analytic constants") {
    Tensor<double> adv = Tensor<double>::scalar(0.3);
    Tensor<double> feat = Tensor<double>::scalar(0.4);
    Tensor<double> vgg = Tensor<double>::scalar(0.5);
    Tensor<double> pen = Tensor<double>::scalar(0.6);
    for (auto* t : {&adv, &feat, &vgg, &pen}) t->set_requires_grad(true);
    Tape<double> tape;
    {
      TapeScope<double> scope(tape);
      tape.backward(total_refiner_loss(adv, feat, vgg, pen, calib));
    }
    CHECK(adv.grad()[0] == 0.5 / calib.m());
    CHECK(feat.grad()[0] == 0.5 / calib.n());
    CHECK(vgg.grad()[0] == 1.0 / calib.o());
    CHECK(pen.grad()[0] == calib.alpha());
  }
}

TEST_CASE("replay buffer") {
  RngStream rng(5);
  auto make_item = [&](double v) {
    return Tensor<float>({2, 2, 2}, static_cast<float>(v));
  };

  SUBCASE("first batch passes through untouched") {
    ReplayBuffer<float> buffer(80, 0.5);
    std::vector<Tensor<float>> fresh{make_item(1), make_item(2), make_item(3)};
    auto batch = buffer.push_sample(fresh, rng);
    REQUIRE(batch.size() == 3);
    for (size_t i = 0; i < 3; ++i) {
      for (size_t j = 0; j < batch[i].numel(); ++j) {
        CHECK(batch[i].data()[j] == fresh[i].data()[j]);
      }
    }
    CHECK(buffer.size() == 3);
  }

  SUBCASE("capacity saturates at exactly 80") {
    ReplayBuffer<float> buffer(80, 0.5);
    for (int round = 0; round < 50; ++round) {
      std::vector<Tensor<float>> fresh{make_item(round), make_item(round + 0.5)};
      buffer.push_sample(fresh, rng);
    }
    CHECK(buffer.size() == 80);  // 100 pushed
  }

  SUBCASE("draw fraction approaches p") {
    ReplayBuffer<float> buffer(4, 0.5);
    // Prefill with recognizable residents.
    buffer.push_sample({make_item(-1), make_item(-2), make_item(-3), make_item(-4)}, rng);
    size_t drawn = 0, total = 0;
    for (int round = 0; round < 2500; ++round) {
      std::vector<Tensor<float>> fresh{make_item(1000 + round), make_item(2000 + round),
                                       make_item(3000 + round), make_item(4000 + round)};
      auto batch = buffer.push_sample(fresh, rng);
      for (size_t i = 0; i < batch.size(); ++i) {
        drawn += batch[i].data()[0] != fresh[i].data()[0];
        ++total;
      }
    }
    CHECK(total == 10000);
    CHECK(std::abs(static_cast<double>(drawn) / total - 0.5) < 0.02);
  }

  SUBCASE("determinism under a fixed stream") {
    auto run = [&](uint64_t seed) {
      RngStream r(seed);
      ReplayBuffer<float> buffer(8, 0.5);
      std::vector<float> trace;
      for (int round = 0; round < 20; ++round) {
        auto batch = buffer.push_sample({make_item(round), make_item(round + 100)}, r);
        for (const auto& t : batch) trace.push_back(t.data()[0]);
      }
      return trace;
    };
    CHECK(run(7) == run(7));
  }

  SUBCASE("invalid construction") {
    CHECK_THROWS_AS(ReplayBuffer<float>(0, 0.5), ConfigError);
    CHECK_THROWS_AS(ReplayBuffer<float>(8, 1.5), ConfigError);
  }
}

TEST_CASE("losses are non-negative and finite under clamping") {
  RngStream rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor<double> p = testutil::random_tensor({4}, rng, -0.5, 1.5);  // deliberately out of range
    const double adv = adversarial_loss(p).item();
    CHECK(std::isfinite(adv));
    CHECK(adv >= 0.0);
    Tensor<double> q = testutil::random_tensor({4}, rng, -0.5, 1.5);
    const double d = discriminator_loss(p, q, 0.1).item();
    CHECK(std::isfinite(d));
    CHECK(d >= 0.0);
  }
}

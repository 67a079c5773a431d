#include <cstdio>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "retseg/checkpoint.hpp"
#include "retseg/gradcheck.hpp"
#include "retseg/unet.hpp"

using namespace retseg;

namespace {

UNetConfig small_config() {
  UNetConfig cfg;
  cfg.encoder_levels = 3;
  cfg.base_filters = 4;
  return cfg;
}

}  // namespace

TEST_SUITE("unet") {

TEST_CASE("forward emits a probability map of input resolution") {
  RngStream rng(1);
  UNetModel m = build_unet(small_config(), rng);
  Tensor x = he_init({2, 3, 16, 24}, 3, rng);
  Tensor p = forward(m, x, Mode::Train);
  CHECK(p.dim(0) == 2);
  CHECK(p.dim(1) == 1);
  CHECK(p.dim(2) == 16);
  CHECK(p.dim(3) == 24);
  for (float v : p.data()) {
    CHECK(v > 0.0f);
    CHECK(v < 1.0f);
  }
}

TEST_CASE("input validation: channels and divisibility") {
  RngStream rng(1);
  UNetModel m = build_unet(small_config(), rng);
  CHECK_THROWS_AS(forward(m, he_init({1, 4, 16, 16}, 4, rng), Mode::Eval), ShapeError);
  // pool factor is 4 for 3 levels; 18 is not divisible
  CHECK_THROWS_AS(forward(m, he_init({1, 3, 18, 16}, 3, rng), Mode::Eval), ShapeError);
}

TEST_CASE("parameter count is seed independent and names are unique") {
  RngStream r1(1), r2(99);
  UNetModel a = build_unet(small_config(), r1);
  UNetModel b = build_unet(small_config(), r2);
  CHECK(a.params.total_elements() == b.params.total_elements());
  CHECK(a.params.size() == b.params.size());
  std::set<std::string> names;
  for (const auto& e : a.params.entries()) names.insert(e.name);
  CHECK(names.size() == a.params.size());
}

TEST_CASE("constrained decoder widths change decoder shape only") {
  UNetConfig cfg;
  cfg.encoder_levels = 4;
  cfg.base_filters = 16;
  cfg.decoder_widths = {16, 8, 4};
  RngStream rng(1);
  UNetModel m = build_unet(cfg, rng);
  CHECK(m.decoder[0].up_w.dim(1) == 16);
  CHECK(m.decoder[1].up_w.dim(1) == 8);
  CHECK(m.decoder[2].up_w.dim(1) == 4);
  CHECK(m.head_w.dim(1) == 4);

  UNetConfig bad = cfg;
  bad.decoder_widths = {16, 8};
  CHECK_THROWS_AS(bad.validate(), ValueError);
}

TEST_CASE("conv skip connections add parameters and stay shape compatible") {
  UNetConfig cfg = small_config();
  RngStream r1(1);
  UNetModel plain = build_unet(cfg, r1);
  cfg.conv_skip_connections = true;
  RngStream r2(1);
  UNetModel skip = build_unet(cfg, r2);
  CHECK(skip.params.total_elements() > plain.params.total_elements());
  Tensor x = he_init({1, 3, 16, 16}, 3, r1);
  Tensor p = forward(skip, x, Mode::Train);
  CHECK(p.dim(2) == 16);
}

TEST_CASE("residual branch contributes to the output") {
  RngStream rng(7);
  UNetModel m = build_unet(small_config(), rng);
  Tensor x = he_init({1, 3, 16, 16}, 3, rng);
  Tensor before = forward(m, x, Mode::Eval);
  for (auto& lvl : m.encoder) {
    for (auto& v : lvl.res_w.data()) v = 0.0f;
    for (auto& v : lvl.res_b.data()) v = 0.0f;
  }
  Tensor after = forward(m, x, Mode::Eval);
  double diff = 0.0;
  for (std::size_t i = 0; i < before.size(); ++i)
    diff += std::abs(static_cast<double>(before.data()[i]) - after.data()[i]);
  CHECK(diff > 0.0);
}

TEST_CASE("registry entries alias the layer tensors") {
  RngStream rng(1);
  UNetModel m = build_unet(small_config(), rng);
  Tensor& w = m.params.at("encoder.l0.block1.conv.w");
  CHECK(w.same_storage(m.encoder[0].block1.w));
  w.data()[0] = 42.0f;
  CHECK(m.encoder[0].block1.w.data()[0] == 42.0f);
}

TEST_CASE("encoder-prefix checkpoint load copies encoder weights only") {
  namespace fs = std::filesystem;
  const std::string path = (fs::temp_directory_path() / "unet_prefix_test.ntc").string();
  RngStream r1(1);
  UNetModel src = build_unet(small_config(), r1);
  save_checkpoint(path, src.params);

  RngStream r2(2);
  UNetModel dst = build_unet(small_config(), r2);
  const Tensor head_before = dst.head_w.clone();
  const std::size_t loaded = load_checkpoint(path, dst.params, "encoder.");
  CHECK(loaded > 0);
  for (std::size_t i = 0; i < src.encoder[0].block1.w.size(); ++i)
    CHECK(dst.encoder[0].block1.w.data()[i] == src.encoder[0].block1.w.data()[i]);
  for (std::size_t i = 0; i < head_before.size(); ++i)
    CHECK(dst.head_w.data()[i] == head_before.data()[i]);

  CHECK_THROWS_AS(load_checkpoint(path, dst.params, "nonexistent."), ValueError);
  std::remove(path.c_str());
}

TEST_CASE("composite gradient check against f64 oracle") {
  RngStream rng = RngStream::keyed(1, {0xC3u});
  UNetModel model = build_unet(small_config(), rng);
  Tensor x = he_init({1, 3, 16, 16}, 3, rng);
  Tensor target = Tensor::zeros({1, 1, 16, 16});
  for (auto& v : target.data()) v = rng.bernoulli(0.3f) ? 1.0f : 0.0f;
  UNetModelT<double> dmodel = cast_unet<double>(model);
  GradCheckOptions opt;
  opt.max_coords_per_input = 8;
  opt.eps = 1e-4;
  const double err = grad_check(
      {x},
      [&](FloatTape* tape) {
        Tensor pred = forward(model, x, Mode::Train, tape);
        return bce_masked(tape, pred, target, Tensor());
      },
      [&](const std::vector<TensorT<double>>& in) {
        TensorT<double> pred =
            forward(dmodel, in[0], Mode::Train, static_cast<Tape<double>*>(nullptr));
        return bce_masked<double>(nullptr, pred, to_double(target), TensorT<double>()).item();
      },
      opt);
  CHECK(err < 1e-2);
}

}  // TEST_SUITE

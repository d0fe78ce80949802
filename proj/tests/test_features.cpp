#include <doctest.h>

#include <algorithm>
#include <filesystem>

#include "tedm/features/features.hpp"
#include "test_support.hpp"

using namespace tedm;
using namespace tedm::features;
using tedm::testing::random_tensor;
using tedm::testing::TempDir;

namespace {

diffusion::DenoiserConfig small_config() {
  diffusion::DenoiserConfig c;
  c.height = 16;
  c.width = 16;
  c.widths = {4, 8};
  c.mid_width = 8;
  c.time_dim = 8;
  return c;
}

LatentStack random_stack(std::vector<std::size_t> steps, std::size_t c, std::size_t h, std::size_t w,
                         std::uint64_t seed) {
  LatentStack s;
  s.steps = steps;
  for (std::size_t i = 0; i < steps.size(); ++i) s.latents.push_back(random_tensor({c, h, w}, seed + i));
  return s;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::kOk;
}

}  // namespace

TEST_CASE("timestep sets") {
  const TimestepSet s({800, 1, 25, 10}, 1000);
  CHECK(s.steps() == std::vector<std::size_t>{1, 10, 25, 800});
  CHECK(code_of([] { TimestepSet({}, 1000); }) == ErrorCode::kInvalidTimestep);
  CHECK(code_of([] { TimestepSet({0, 5}, 1000); }) == ErrorCode::kInvalidTimestep);
  CHECK(code_of([] { TimestepSet({5, 1001}, 1000); }) == ErrorCode::kInvalidTimestep);
  CHECK(code_of([] { TimestepSet({5, 5}, 1000); }) == ErrorCode::kInvalidTimestep);
}

TEST_CASE("bilinear upsampling") {
  SUBCASE("constant map stays constant") {
    const Tensor c({3, 2, 3}, 1.75f);
    const Tensor up = upsample_bilinear(c, 7, 11);
    CHECK(up.dims() == Dims{3, 7, 11});
    for (float v : up.values()) CHECK(v == 1.75f);
  }
  SUBCASE("identity resize") {
    const Tensor z = random_tensor({2, 5, 4}, 3);
    CHECK(upsample_bilinear(z, 5, 4) == z);
  }
  SUBCASE("hand-computed corner-aligned 2x2 -> 4x4") {
    const Tensor z({1, 2, 2}, std::vector<float>{0, 1, 0, 1});
    const Tensor up = upsample_bilinear(z, 4, 4);
    // Columns sample the source at x = 0, 1/3, 2/3, 1.
    const float expected[4] = {0.0f, 1.0f / 3.0f, 2.0f / 3.0f, 1.0f};
    for (std::size_t y = 0; y < 4; ++y)
      for (std::size_t x = 0; x < 4; ++x) CHECK(up.at(0, y, x) == doctest::Approx(expected[x]).epsilon(1e-7));
  }
  SUBCASE("downscaling is rejected") {
    CHECK(code_of([] { upsample_bilinear(Tensor({1, 4, 4}), 2, 4); }) == ErrorCode::kUnsupportedResize);
  }
  SUBCASE("output stays within the per-channel envelope") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const auto h = static_cast<std::size_t>(rng.uniform_int(1, 6));
      const auto w = static_cast<std::size_t>(rng.uniform_int(1, 6));
      const Tensor z = random_tensor({2, h, w}, 100 + trial);
      const Tensor up = upsample_bilinear(z, h + static_cast<std::size_t>(rng.uniform_int(0, 9)),
                                          w + static_cast<std::size_t>(rng.uniform_int(0, 9)));
      for (std::size_t c = 0; c < 2; ++c) {
        const auto src = z.channel(c);
        const auto [lo, hi] = std::minmax_element(src.begin(), src.end());
        for (float v : up.channel(c)) {
          CHECK(v >= *lo);
          CHECK(v <= *hi);
        }
      }
    }
  }
}

TEST_CASE("extract_latents") {
  const auto schedule = diffusion::build_schedule(1000, 1e-4, 0.02);
  diffusion::Denoiser model(small_config());
  model.init(12);
  Tensor x0 = random_tensor({1, 16, 16}, 5);
  const TimestepSet steps({1, 10, 25, 50, 200, 400, 600, 800}, 1000);

  const auto a = extract_latents(model, x0, 7, steps, schedule, 99);
  const auto b = extract_latents(model, x0, 7, steps, schedule, 99);
  REQUIRE(a.latents.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(a.latents[i] == b.latents[i]);
    CHECK(a.latents[i].dims() == Dims{static_cast<std::size_t>(model.tap_channels()), 16, 16});
  }
  CHECK(a.latents[0] != a.latents[1]);

  SUBCASE("errors") {
    diffusion::Denoiser untrained(small_config());
    CHECK(code_of([&] { extract_latents(untrained, x0, 7, steps, schedule, 1); }) == ErrorCode::kModelError);
    CHECK(code_of([&] { extract_latents(model, Tensor({1, 8, 8}), 7, steps, schedule, 1); }) ==
          ErrorCode::kModelError);
    const auto short_schedule = diffusion::build_schedule(100, 1e-4, 0.02);
    CHECK(code_of([&] { extract_latents(model, x0, 7, steps, short_schedule, 1); }) == ErrorCode::kInvalidTimestep);
  }
}

TEST_CASE("default denoiser taps give 120 channels at input resolution") {
  const auto schedule = diffusion::build_schedule(1000, 1e-4, 0.02);
  diffusion::Denoiser model(diffusion::DenoiserConfig{});
  model.init(1);
  CHECK(model.tap_channels() == 120);
  const Tensor x0 = random_tensor({1, 64, 64}, 2);
  const auto stack =
      extract_latents(model, x0, 1, TimestepSet({1, 10, 25, 50, 200, 400, 600, 800}, 1000), schedule, 3);
  CHECK(stack.latents.size() == 8);
  for (const auto& z : stack.latents) CHECK(z.dims() == Dims{120, 64, 64});
}

TEST_CASE("concat_features") {
  SUBCASE("paper-width blocks") {
    const auto stack = random_stack({50, 150, 250}, 960, 2, 2, 1);
    const auto map = concat_features(stack);
    CHECK(map.z.channels() == 2880);
    CHECK(map.step_order == std::vector<std::size_t>{50, 150, 250});
  }
  SUBCASE("single block is the latent itself") {
    const auto stack = random_stack({10}, 5, 3, 3, 2);
    CHECK(concat_features(stack).z == stack.latents[0]);
  }
  SUBCASE("blocks read back equal latents; split inverts concat") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto stack = random_stack({1, 7, 30, 500}, 3 + seed, 4, 5, 10 * seed);
      const auto map = concat_features(stack);
      const auto back = split_features(map);
      REQUIRE(back.latents.size() == stack.latents.size());
      for (std::size_t k = 0; k < stack.latents.size(); ++k) {
        CHECK(back.latents[k] == stack.latents[k]);
        CHECK(back.steps[k] == stack.steps[k]);
      }
    }
  }
  SUBCASE("heterogeneous shapes") {
    auto stack = random_stack({1, 2}, 3, 4, 4, 0);
    stack.latents[1] = random_tensor({4, 4, 4}, 9);
    CHECK(code_of([&] { concat_features(stack); }) == ErrorCode::kShapeError);
  }
}

TEST_CASE("latent persistence") {
  TempDir dir("latents");
  const auto stack = random_stack({1, 10, 25}, 6, 5, 4, 77);
  const auto path = dir.file("s.lat");
  persist_latents(stack, path);
  const auto back = load_latents(path);
  CHECK(back.steps == stack.steps);
  for (std::size_t k = 0; k < 3; ++k) CHECK(back.latents[k] == stack.latents[k]);

  const auto map = concat_features(stack);
  persist_latents(map, dir.file("m.lat"));
  CHECK(load_feature_map(dir.file("m.lat")).z == map.z);

  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 3);
  CHECK(code_of([&] { load_latents(path); }) == ErrorCode::kFormatError);
  CHECK(code_of([&] { load_latents(dir.file("missing.lat")); }) == ErrorCode::kStorageError);
}

TEST_CASE("latent cache serves repeated keys without recomputation") {
  TempDir dir("cache");
  const auto schedule = diffusion::build_schedule(1000, 1e-4, 0.02);
  diffusion::Denoiser model(small_config());
  model.init(12);
  const auto hash = diffusion::content_hash(model);
  const Tensor x0 = random_tensor({1, 16, 16}, 5);
  const TimestepSet steps({1, 50, 800}, 1000);

  LatentCache cache(dir.str());
  const auto first = cache.get(model, hash, x0, 3, steps, schedule, 11);
  CHECK(cache.computed() == 3);
  CHECK(cache.hits() == 0);
  const auto second = cache.get(model, hash, x0, 3, steps, schedule, 11);
  CHECK(cache.computed() == 3);
  CHECK(cache.hits() == 3);
  for (std::size_t k = 0; k < 3; ++k) CHECK(first.latents[k] == second.latents[k]);
  const auto direct = extract_latents(model, x0, 3, steps, schedule, 11);
  for (std::size_t k = 0; k < 3; ++k) CHECK(direct.latents[k] == first.latents[k]);

  // different seed is a different key
  cache.get(model, hash, x0, 3, TimestepSet({50}, 1000), schedule, 12);
  CHECK(cache.computed() == 4);

  // a second cache over the same directory sees the stored entries
  LatentCache reopened(dir.str());
  reopened.get(model, hash, x0, 3, steps, schedule, 11);
  CHECK(reopened.computed() == 0);
  CHECK(reopened.hits() == 3);
}

TEST_CASE("latent cache keys are write-once") {
  TempDir dir("cache_once");
  LatentCache cache(dir.str());
  const Tensor a = random_tensor({2, 3, 3}, 1), b = random_tensor({2, 3, 3}, 2);
  cache.put("abc", 1, 10, 5, a);
  cache.put("abc", 1, 10, 5, a);
  CHECK(code_of([&] { cache.put("abc", 1, 10, 5, b); }) == ErrorCode::kStorageError);
  CHECK(load_latents(cache.path_for("abc", 1, 10, 5)).latents[0] == a);
}

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "bmod/checkpoint.hpp"
#include "bmod/error.hpp"
#include "bmod/model.hpp"
#include "bmod/rng.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>

using namespace bmod;
using namespace bmod::model;
using doctest::Approx;

namespace {

ModelConfig tiny(int k = 2, bool background = true) {
  ModelConfig c;
  c.image_height = 16;
  c.image_width = 16;
  c.num_object_slots = k;
  c.slot_dim = 8;
  c.feature_dim = 8;
  c.projection_dim = 8;
  c.downsample_factor = 4;
  c.encoder_channels = {4, 8, 8};
  c.decoder_channels = 4;
  c.background_slot = background;
  c.seed = 3;
  return c;
}

std::vector<double> random_values(std::size_t n, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  std::vector<double> v(n);
  for (auto& x : v) x = lo + (hi - lo) * rng.uniform();
  return v;
}

std::vector<double> copy(std::span<const double> s) { return {s.begin(), s.end()}; }

// Scalar probe sum_i r_i * out_i through `f`, optionally backpropagated.
double probe(Model<double>& m, const std::function<nn::Var<double>(Model<double>&, const Model<double>::Bound&,
                                                                   nn::Tape<double>&)>& f,
             bool backward) {
  nn::Tape<double> tape;
  const auto p = m.bind(tape);
  const auto out = f(m, p, tape);
  const auto r = random_values(out.size(), 77, -1.0, 1.0);
  double s = 0.0;
  for (std::size_t i = 0; i < r.size(); ++i) s += r[i] * out.value()[i];
  if (backward) {
    tape.seed(out, r);
    tape.backward();
  }
  return s;
}

// Central differences against the tape on every entry of the named
// parameters; returns the worst mixed absolute/relative error.
template <typename F>
double component_gradient_error(Model<double>& m, const std::vector<std::string>& names, const F& f) {
  // Biases start at zero, which parks ReLU inputs of dead regions exactly on
  // the kink; nudge them off it.
  Rng rng(61);
  for (auto& prm : m.parameters())
    if (prm.name.ends_with(".b") || prm.name.ends_with(".offset"))
      for (auto& v : prm.value) v = 0.1 * rng.normal();
  m.zero_grad();
  probe(m, f, true);
  double worst = 0.0;
  for (const auto& name : names) {
    auto& prm = m.parameter(name);
    for (std::size_t i = 0; i < prm.value.size(); ++i) {
      const double keep = prm.value[i];
      prm.value[i] = keep + 1e-6;
      const double up = probe(m, f, false);
      prm.value[i] = keep - 1e-6;
      const double down = probe(m, f, false);
      prm.value[i] = keep;
      const double numeric = (up - down) / 2e-6;
      const double scale = std::max({1.0, std::fabs(numeric), std::fabs(prm.grad[i])});
      worst = std::max(worst, std::fabs(numeric - prm.grad[i]) / scale);
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("feature grid follows the downsample factor") {
  ModelConfig c = tiny();
  c.image_height = 64;
  c.image_width = 64;
  Model<float> m(c);
  nn::Tape<float> tape;
  const auto p = m.bind(tape);
  auto frame = tape.constant({1, 3, 64, 64}, std::vector<float>(3 * 64 * 64, 0.5f));
  const auto f = m.encode_frame(p, frame);
  CHECK(f.shape() == nn::Shape{1, 8, 16, 16});
  auto state = m.zero_state(tape, 1);
  const auto tok = m.tokens(p, m.temporal_step(p, f, state));
  CHECK(tok.shape() == nn::Shape{1, 256, 8});
}

TEST_CASE("config validation") {
  ModelConfig c = tiny();
  c.image_width = 18;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = tiny();
  c.downsample_factor = 3;
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = tiny();
  c.encoder_channels = {4, 8};
  CHECK_THROWS_AS(validate(c), ConfigError);
  c = tiny(0, true);
  CHECK_THROWS_AS(validate(c), ConfigError);
  CHECK_NOTHROW(validate(tiny(0, false)));
}

TEST_CASE("identical frames give identical features") {
  Model<double> m(tiny());
  nn::Tape<double> tape;
  const auto p = m.bind(tape);
  auto one = random_values(3 * 16 * 16, 5);
  std::vector<double> two = one;
  two.insert(two.end(), one.begin(), one.end());
  const auto f = m.encode_frame(p, tape.constant({2, 3, 16, 16}, two));
  const std::size_t half = f.size() / 2;
  for (std::size_t i = 0; i < half; ++i) REQUIRE(f.value()[i] == f.value()[half + i]);
  CHECK_THROWS_AS(m.encode_frame(p, tape.constant({1, 3, 8, 8}, std::vector<double>(192))), ConfigError);
}

TEST_CASE("the recurrent state settles on a constant input") {
  Model<double> m(tiny());
  nn::Tape<double> tape;
  const auto p = m.bind(tape);
  const auto f = m.encode_frame(p, tape.constant({1, 3, 16, 16}, random_values(3 * 16 * 16, 8)));
  auto state = m.zero_state(tape, 1);
  std::vector<double> previous = copy(state.value());
  double last_delta = INFINITY;
  for (int t = 0; t < 30; ++t) {
    state = m.temporal_step(p, f, state);
    const auto now = copy(state.value());
    double delta = 0.0;
    for (std::size_t i = 0; i < now.size(); ++i) delta += (now[i] - previous[i]) * (now[i] - previous[i]);
    delta = std::sqrt(delta);
    CHECK(delta <= last_delta + 1e-12);
    last_delta = delta;
    previous = now;
  }
  CHECK(last_delta < 1e-3);
}

TEST_CASE("attention rows are distributions over slots") {
  for (bool background : {true, false}) {
    Model<double> m(tiny(2, background));
    nn::Tape<double> tape;
    const auto p = m.bind(tape);
    std::vector<nn::Var<double>> frames;
    for (int t = 0; t < 2; ++t) frames.push_back(tape.constant({2, 3, 16, 16}, random_values(2 * 3 * 256, 10 + t)));
    const auto noise = random_values(2 * m.sampled_slots() * 8, 4, -2.0, 2.0);
    const auto out = m.forward_sequence(p, tape, frames, m.initial_slots(p, tape, 2, noise));
    REQUIRE(out.size() == 2);
    for (const auto& o : out) {
      REQUIRE(o.attention.shape() == nn::Shape{2, 16, 3});
      REQUIRE(o.slots.shape() == nn::Shape{2, 3, 8});
      REQUIRE(o.reconstruction.shape() == nn::Shape{2, 3, 16, 16});
      const auto w = o.attention.value();
      for (std::size_t row = 0; row < 32; ++row) {
        double sum = 0.0;
        for (int s = 0; s < 3; ++s) {
          CHECK(w[row * 3 + s] >= 0.0);
          sum += w[row * 3 + s];
        }
        CHECK(sum == Approx(1.0).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("a single slot takes all attention") {
  Model<double> m(tiny(0, false));
  nn::Tape<double> tape;
  const auto p = m.bind(tape);
  std::vector<nn::Var<double>> frames{tape.constant({1, 3, 16, 16}, random_values(768, 1)),
                                      tape.constant({1, 3, 16, 16}, random_values(768, 2))};
  const auto out = m.forward_sequence(p, tape, frames, m.initial_slots(p, tape, 1, random_values(8, 3)));
  for (const auto& o : out)
    for (double v : o.attention.value()) CHECK(v == 1.0);
}

TEST_CASE("permuting object slot initializations permutes attention columns and slots") {
  const ModelConfig c = tiny(3);
  Model<double> m(c);
  const int dim = c.slot_dim, k = c.num_object_slots, s = c.num_slots();
  const auto noise = random_values(static_cast<std::size_t>(k) * dim, 12, -2.0, 2.0);
  const std::vector<int> perm{2, 0, 1};  // object slot i takes the noise of slot perm[i]
  std::vector<double> permuted(noise.size());
  for (int i = 0; i < k; ++i) std::copy_n(noise.begin() + perm[i] * dim, dim, permuted.begin() + i * dim);

  auto run = [&](const std::vector<double>& nz) {
    nn::Tape<double> tape;
    const auto p = m.bind(tape);
    std::vector<nn::Var<double>> frames{tape.constant({1, 3, 16, 16}, random_values(768, 20)),
                                        tape.constant({1, 3, 16, 16}, random_values(768, 21))};
    const auto out = m.forward_sequence(p, tape, frames, m.initial_slots(p, tape, 1, nz));
    return std::make_tuple(copy(out.back().attention.value()), copy(out.back().slots.value()),
                           copy(out.back().reconstruction.value()));
  };
  const auto [w0, s0, r0] = run(noise);
  const auto [w1, s1, r1] = run(permuted);
  const int n = c.grid_size();
  auto source = [&](int col) { return col == 0 ? 0 : 1 + perm[col - 1]; };
  for (int i = 0; i < n; ++i)
    for (int col = 0; col < s; ++col) CHECK(w1[i * s + col] == Approx(w0[i * s + source(col)]).epsilon(1e-9));
  for (int col = 0; col < s; ++col)
    for (int d = 0; d < dim; ++d) CHECK(s1[col * dim + d] == Approx(s0[source(col) * dim + d]).epsilon(1e-9));
  for (std::size_t i = 0; i < r0.size(); ++i) CHECK(r1[i] == Approx(r0[i]).epsilon(1e-9));
}

TEST_CASE("zero attention decodes to the same image for any slots") {
  Model<double> m(tiny());
  nn::Tape<double> tape;
  const auto p = m.bind(tape);
  auto zero = tape.constant({1, 16, 3}, std::vector<double>(48, 0.0));
  const auto a = m.decode(p, tape.constant({1, 3, 8}, random_values(24, 1, -3.0, 3.0)), zero);
  const auto b = m.decode(p, tape.constant({1, 3, 8}, random_values(24, 2, -3.0, 3.0)), zero);
  CHECK(copy(a.value()) == copy(b.value()));
}

TEST_CASE("predict_segmentation") {
  // one-hot rows give their index
  std::vector<double> onehot(4 * 3, 0.0);
  const std::vector<int> want{2, 0, 1, 2};
  for (int i = 0; i < 4; ++i) onehot[i * 3 + want[i]] = 1.0;
  CHECK(predict_segmentation<double>(onehot, 2, 2, 3, 2, 2) == want);

  // uniform rows tie toward slot 0
  const std::vector<double> uniform(4 * 3, 1.0 / 3.0);
  for (int v : predict_segmentation<double>(uniform, 2, 2, 3, 4, 4)) CHECK(v == 0);

  // nearest upsampling by 2 replicates each cell into a 2x2 block
  const auto up = predict_segmentation<double>(onehot, 2, 2, 3, 4, 4);
  CHECK(up == std::vector<int>{2, 2, 0, 0, 2, 2, 0, 0, 1, 1, 2, 2, 1, 1, 2, 2});

  // two columns: brute-force comparison
  const auto two = random_values(64 * 2, 30);
  const auto seg = predict_segmentation<double>(two, 8, 8, 2, 8, 8);
  for (int i = 0; i < 64; ++i) CHECK(seg[i] == (two[i * 2 + 1] > two[i * 2] ? 1 : 0));

  CHECK_THROWS_AS(predict_segmentation<double>(two, 8, 8, 3, 8, 8), std::invalid_argument);
}

TEST_CASE("encoder gradients match finite differences") {
  Model<double> m(tiny());
  const auto frame = random_values(2 * 768, 40);
  const double err = component_gradient_error(m, {"enc0.w", "enc0.b", "enc1.w", "enc2.w", "enc2.b"},
                                              [&](auto& model, const auto& p, auto& tape) {
                                                return model.encode_frame(p, tape.constant({2, 3, 16, 16}, frame));
                                              });
  CHECK(err < 1e-5);
}

TEST_CASE("recurrent update gradients match finite differences") {
  Model<double> m(tiny());
  const auto feat = random_values(8 * 16, 41, -1.0, 1.0);
  const auto state = random_values(8 * 16, 42, -1.0, 1.0);
  const double err = component_gradient_error(m, {"gru.gates.w", "gru.gates.b", "gru.cand.w", "gru.cand.b"},
                                              [&](auto& model, const auto& p, auto& tape) {
                                                auto h = tape.constant({1, 8, 4, 4}, state);
                                                auto f = tape.constant({1, 8, 4, 4}, feat);
                                                return model.temporal_step(p, f, model.temporal_step(p, f, h));
                                              });
  CHECK(err < 1e-5);
}

TEST_CASE("attention and decoder gradients match finite differences") {
  Model<double> m(tiny());
  const auto fused = random_values(8 * 16, 43, -1.0, 1.0);
  const auto noise = random_values(2 * 8, 44, -1.0, 1.0);
  for (std::string name : {"pos.w", "mlp1.w", "mlp2.b", "token_norm.gain", "proj_k.w", "proj_v.b", "proj_q.w",
                           "slot_norm.offset", "slots.background", "slots.mean", "slots.log_std", "dec0.w", "dec2.b",
                           "dec_out.w"}) {
    CAPTURE(name);
    const double err = component_gradient_error(m, {name}, [&](auto& model, const auto& p, auto& tape) {
      auto tok = model.tokens(p, tape.constant({1, 8, 4, 4}, fused));
      auto step = model.slot_attention_step(p, tok, model.initial_slots(p, tape, 1, noise));
      return model.decode(p, step.slots, step.attention);
    });
    CHECK(err < 1e-5);
  }
}

TEST_CASE("checkpoint round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "bmod_test_ckpt";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  Model<float> m(tiny());
  m.parameter("dec0.b").value[1] = 0.125f;
  const nlohmann::json extra{{"frames_per_clip", 2}};
  save_checkpoint(dir / "a.ckpt", m, 17, extra);
  CheckpointInfo info;
  const auto back = load_checkpoint<float>(dir / "a.ckpt", &info);
  CHECK(info.step == 17);
  CHECK(info.extra == extra);
  CHECK(back.config() == m.config());
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == m.parameters()[i].name);
    CHECK(back.parameters()[i].value == m.parameters()[i].value);
  }

  { std::ofstream(dir / "bad.ckpt", std::ios::binary) << "NOTACKPT and more bytes"; }
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "bad.ckpt"), IoError);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "missing.ckpt"), IoError);
  std::filesystem::resize_file(dir / "a.ckpt", std::filesystem::file_size(dir / "a.ckpt") - 4);
  CHECK_THROWS_AS(load_checkpoint<float>(dir / "a.ckpt"), IoError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("same seed gives the same initialization") {
  Model<float> a(tiny()), b(tiny());
  for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i].value == b.parameters()[i].value);
  ModelConfig c = tiny();
  c.seed = 4;
  Model<float> other(c);
  CHECK(other.parameter("enc0.w").value != a.parameter("enc0.w").value);
}

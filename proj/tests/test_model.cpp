#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "qsr/error.hpp"
#include "qsr/model.hpp"
#include "qsr/ops.hpp"
#include "test_support.hpp"

using namespace qsr;
using namespace qsr::model;
using ad::Shape;
using ad::Tensor;
using TensorD = Tensor<double>;

namespace {

std::vector<double> values(const TensorD& t) { return {t.data().begin(), t.data().end()}; }

ModulationParams<double> neutral_mods(std::size_t b, std::size_t n, std::size_t d, double gate) {
  auto z = TensorD::zeros({b, n, d});
  auto g = TensorD::full({b, n, d}, gate);
  return {z, z, g, z, z, g};
}

// Plain-loop pre-norm transformer block on [S, D] rows with the model's weights.
std::vector<double> reference_block(const DiffusionTransformer<double>& m, std::size_t block, std::vector<double> h,
                                    std::size_t S, std::size_t D, std::size_t heads) {
  const std::string p = "blocks." + std::to_string(block) + ".";
  auto W = [&](const std::string& n) { return m.parameters().at(p + n).data(); };
  auto ln = [&](const std::vector<double>& x) {
    std::vector<double> y(x.size());
    for (std::size_t s = 0; s < S; ++s) {
      double mu = 0, var = 0;
      for (std::size_t d = 0; d < D; ++d) mu += x[s * D + d];
      mu /= D;
      for (std::size_t d = 0; d < D; ++d) var += (x[s * D + d] - mu) * (x[s * D + d] - mu);
      var /= D;
      for (std::size_t d = 0; d < D; ++d) y[s * D + d] = (x[s * D + d] - mu) / std::sqrt(var + 1e-6);
    }
    return y;
  };
  auto linear = [&](const std::vector<double>& x, const std::string& n, std::size_t in, std::size_t out) {
    const auto w = W(n + ".weight");
    const auto b = W(n + ".bias");
    std::vector<double> y(S * out);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t o = 0; o < out; ++o) {
        double acc = b[o];
        for (std::size_t i = 0; i < in; ++i) acc += x[s * in + i] * w[i * out + o];
        y[s * out + o] = acc;
      }
    }
    return y;
  };
  const auto qkv = linear(ln(h), "qkv", D, 3 * D);
  const std::size_t dh = D / heads;
  std::vector<double> ctx(S * D, 0.0);
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t i = 0; i < S; ++i) {
      std::vector<double> sc(S);
      double mx = -1e300;
      for (std::size_t j = 0; j < S; ++j) {
        double dot = 0;
        for (std::size_t k = 0; k < dh; ++k) dot += qkv[i * 3 * D + hd * dh + k] * qkv[j * 3 * D + D + hd * dh + k];
        sc[j] = dot / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, sc[j]);
      }
      double z = 0;
      for (auto& v : sc) z += (v = std::exp(v - mx));
      for (std::size_t j = 0; j < S; ++j) {
        for (std::size_t k = 0; k < dh; ++k) ctx[i * D + hd * dh + k] += sc[j] / z * qkv[j * 3 * D + 2 * D + hd * dh + k];
      }
    }
  }
  const auto attn = linear(ctx, "proj", D, D);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += attn[i];
  auto mid = linear(ln(h), "fc1", D, 4 * D);
  for (auto& v : mid) v = 0.5 * v * (1 + std::tanh(0.7978845608028654 * (v + 0.044715 * v * v * v)));
  const auto mlp = linear(mid, "fc2", 4 * D, D);
  for (std::size_t i = 0; i < h.size(); ++i) h[i] += mlp[i];
  return h;
}

}  // namespace

TEST(Patchify, GridSizesAndRoundTrip) {
  const auto x = test::random_volume<double>({2, 32, 32, 3}, 1);
  const auto t = patchify(x, 8);
  EXPECT_EQ(t.shape(), (Shape{2, 3, 16, 64}));
  EXPECT_EQ(values(unpatchify(t, 32, 32)), values(x));
  const auto one = patchify(test::random_volume<double>({1, 8, 8, 2}, 2), 8);
  EXPECT_EQ(one.shape(), (Shape{1, 2, 1, 64}));
  EXPECT_THROW(patchify(test::random_volume<double>({1, 30, 32, 2}, 3), 8), InvalidArgument);
}

TEST(Patchify, TokenHoldsItsPatch) {
  const auto x = test::random_volume<double>({1, 4, 6, 2}, 4);
  const auto t = patchify(x, 2);  // grid 2 x 3
  // Patch (gy=1, gx=2), direction 1, pixel (1, 0) -> image (3, 4).
  EXPECT_EQ(t.data()[((0 * 2 + 1) * 6 + (1 * 3 + 2)) * 4 + 2], x.data()[(3 * 6 + 4) * 2 + 1]);
}

TEST(Encoding, AngularProperties) {
  const Vec3 u = Vec3(0.3, -0.5, 0.8).normalized();
  EXPECT_EQ(angular_encoding(u, 64), angular_encoding(u, 64));
  EXPECT_NE(angular_encoding(u, 64), angular_encoding(-u, 64));
  const auto dirs = phantom::generate_directions(40, 2);
  for (const auto& d : dirs) {
    const auto e = angular_encoding(d, 64);
    double n2 = 0;
    for (double v : e) n2 += v * v;
    EXPECT_NEAR(n2, 32.0, 1e-9);
  }
  const auto t = phantom::make_shell(5, 1000, 1);
  EXPECT_EQ(positional_encoding(4, 4, t, 16).size(), 5u * 16u * 16u);
}

TEST(Config, ValidationAndJson) {
  ModelConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.patches(), 16u);
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = ModelConfig{};
  c.patch = 5;
  EXPECT_THROW(c.validate(), ConfigError);
  c = test::tiny_config(false);
  const auto back = model_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_THROW(model_config_from_json(nlohmann::json{{"dim", "wide"}}), ConfigError);
}

TEST(ParameterCount, MatchesFormula) {
  for (bool mod : {true, false}) {
    for (std::size_t dim : {8, 64, 128}) {
      ModelConfig c;
      c.dim = dim;
      c.geometry_modulation = mod;
      const std::size_t d = dim, p2 = 64, depth = 4;
      const std::size_t expected =
          p2 * d + d + 2 * d + depth * (12 * d * d + 9 * d) + (mod ? depth * (7 * d * d + 10 * d) : 0) + d * p2 + p2;
      EXPECT_EQ(parameter_count(c), expected);
      EXPECT_EQ(DiffusionTransformer<float>(c).parameter_count(), expected);
    }
  }
}

TEST(Modulation, ZeroAtInitAndDeterministic) {
  const auto c = test::tiny_config();
  DiffusionTransformer<double> m(c);
  const auto bv = TensorD::constant({1, 2, 3}, {1, 0, 0, 0, 0.6, 0.8});
  const auto te = TensorD::constant({1, 8}, timestep_embedding(17, 8));
  const auto mods = m.modulation(0, bv, te);
  for (const auto* t : {&mods.scale_attn, &mods.shift_attn, &mods.gate_attn, &mods.scale_mlp, &mods.shift_mlp,
                        &mods.gate_mlp}) {
    EXPECT_EQ(t->shape(), (Shape{1, 2, 8}));
    for (double v : t->data()) EXPECT_EQ(v, 0.0);
  }
  test::perturb_parameters(m, 5);
  const auto a = m.modulation(1, bv, te), b = m.modulation(1, bv, te);
  EXPECT_EQ(values(a.gate_mlp), values(b.gate_mlp));
}

TEST(Block, ZeroGatesAreIdentity) {
  DiffusionTransformer<double> m(test::tiny_config());
  test::perturb_parameters(m, 7);
  const auto h = test::random_volume<double>({2, 3, 4, 8}, 8, 5.0);
  const auto out = m.block_forward(0, h, neutral_mods(2, 3, 8, 0.0));
  EXPECT_EQ(values(out), values(h));
}

TEST(Block, NeutralModulationIsPreNormBlock) {
  DiffusionTransformer<double> m(test::tiny_config());
  test::perturb_parameters(m, 9);
  const auto h = test::random_volume<double>({1, 3, 4, 8}, 10);
  const auto out = m.block_forward(1, h, neutral_mods(1, 3, 8, 1.0));
  const auto ref = reference_block(m, 1, values(h), 12, 8, 2);
  for (std::size_t i = 0; i < ref.size(); ++i) EXPECT_NEAR(out.data()[i], ref[i], 1e-12);
}

TEST(Block, FiniteForLargeInputs) {
  DiffusionTransformer<float> m(test::tiny_config());
  test::perturb_parameters(m, 11, 2.0);
  std::mt19937_64 rng(12);
  std::uniform_real_distribution<float> u(-10.0f, 10.0f);
  const auto bv = Tensor<float>::constant({1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<float> v(3 * 4 * 8);
    for (auto& x : v) x = u(rng);
    const auto te = Tensor<float>::constant({1, 8}, std::vector<float>(8, u(rng)));
    const auto out = m.block_forward(trial % 2, Tensor<float>::constant({1, 3, 4, 8}, v), m.modulation(trial % 2, bv, te));
    for (float x : out.data()) ASSERT_TRUE(std::isfinite(x)) << trial;
  }
}

TEST(Block, GradientMatchesFiniteDifferences) {
  DiffusionTransformer<double> m(test::tiny_config());
  test::perturb_parameters(m, 13);
  const auto bv = TensorD::constant({1, 2, 3}, {1, 0, 0, 0, 0.6, 0.8});
  const auto te = TensorD::constant({1, 8}, timestep_embedding(40, 8));
  const auto mods = m.modulation(0, bv, te);
  const auto w = test::random_volume<double>({1, 2, 4, 8}, 14);
  auto f = [&](const TensorD& h) { return ad::sum(ad::mul(m.block_forward(0, h, mods), w)); };
  const auto r = ad::finite_diff_check<double>(f, test::random_volume<double>({1, 2, 4, 8}, 15), 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_index;
}

TEST(PredictNoise, ZeroAtInitAndEqualsHeadOfEmbedding) {
  const auto c = test::tiny_config(true, 3);
  DiffusionTransformer<double> m(c);
  const auto q = test::tiny_query<double>(c, 2, 5, 1);
  const auto eps = m.predict_noise(q, 1000);
  EXPECT_EQ(eps.shape(), q.x_t.shape());
  for (double v : eps.data()) EXPECT_EQ(v, 0.0);

  // With nonzero head but zero modulation, every block is the identity.
  auto& head = m.parameter("head.weight");
  test::perturb_parameters(m, 3);
  for (const auto& [name, p] : m.parameters()) {
    if (name.find(".mod.fc2.") != std::string::npos) {
      auto t = p;
      for (auto& v : t.mutable_data()) v = 0.0;
    }
  }
  ASSERT_NE(head.data()[0], 0.0);
  const auto observed = mask_volume<double>(q.masks, c.height, c.width);
  const auto x_inp = ad::add(ad::mul(q.x_obs, observed), ad::mul(q.x_t, ad::add_scalar(ad::scale(observed, -1.0), 1.0)));
  const auto direct = m.head(m.embed(x_inp, q.masks, q.tables));
  EXPECT_EQ(values(m.predict_noise(q, 1000)), values(direct));
}

TEST(PredictNoise, RejectsBadInputs) {
  const auto c = test::tiny_config();
  DiffusionTransformer<float> m(c);
  auto q = test::tiny_query<float>(c, 1, 4, 2);
  q.timesteps[0] = 0;
  EXPECT_THROW(m.predict_noise(q, 1000), InvalidArgument);
  q.timesteps[0] = 1001;
  EXPECT_THROW(m.predict_noise(q, 1000), InvalidArgument);
  q.timesteps[0] = 1000;
  EXPECT_NO_THROW(m.predict_noise(q, 1000));
  q.tables[0].bvecs[1] *= 1.01;
  EXPECT_THROW(m.predict_noise(q, 1000), InvalidArgument);
  q = test::tiny_query<float>(c, 1, 4, 2);
  q.masks[0].observed.pop_back();
  EXPECT_THROW(m.predict_noise(q, 1000), InvalidArgument);
  q = test::tiny_query<float>(c, 1, 4, 2);
  q.x_t = test::random_volume<float>({1, 8, 8, 4}, 1);
  EXPECT_THROW(m.predict_noise(q, 1000), InvalidArgument);
}

TEST(PredictNoise, DirectionPermutationEquivariance) {
  const auto c = test::tiny_config();
  DiffusionTransformer<double> m(c);
  test::perturb_parameters(m, 21);
  const std::size_t n = 5;
  const auto q = test::tiny_query<double>(c, 1, n, 4);
  const std::vector<std::size_t> perm = {3, 0, 4, 2, 1};
  auto permute = [&](const TensorD& x) {
    std::vector<double> v(x.size());
    for (std::size_t pix = 0; pix < x.size() / n; ++pix) {
      for (std::size_t k = 0; k < n; ++k) v[pix * n + k] = x.data()[pix * n + perm[k]];
    }
    return TensorD::constant(x.shape(), v);
  };
  model::NoiseQuery<double> pq = q;
  pq.x_t = permute(q.x_t);
  pq.x_obs = permute(q.x_obs);
  for (std::size_t k = 0; k < n; ++k) {
    pq.masks[0].observed[k] = q.masks[0].observed[perm[k]];
    pq.tables[0].bvecs[k] = q.tables[0].bvecs[perm[k]];
    pq.tables[0].bvals[k] = q.tables[0].bvals[perm[k]];
  }
  const auto a = permute(m.predict_noise(q, 1000));
  const auto b = m.predict_noise(pq, 1000);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
}

TEST(PredictNoise, BitwiseDeterministic) {
  const auto c = test::tiny_config();
  DiffusionTransformer<float> m1(c), m2(c);
  test::perturb_parameters(m1, 5);
  test::perturb_parameters(m2, 5);
  const auto q = test::tiny_query<float>(c, 2, 6, 9);
  const auto a = m1.predict_noise(q, 1000), b = m2.predict_noise(q, 1000);
  EXPECT_TRUE(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST(PredictNoise, ModulationParametersReceiveGradient) {
  const auto c = test::tiny_config();
  DiffusionTransformer<double> m(c);
  test::perturb_parameters(m, 31);
  const auto q = test::tiny_query<double>(c, 2, 4, 3);
  const auto g = ad::backward(ad::mse(m.predict_noise(q, 1000), q.x_t));
  for (const auto& [name, p] : m.parameters()) {
    if (name.find(".mod.") == std::string::npos) continue;
    double norm = 0.0;
    for (double v : g.of(p)) norm += v * v;
    EXPECT_GT(norm, 0.0) << name;
  }
}

TEST(PredictNoise, FullModelGradientMatchesFiniteDifferences) {
  const auto c = test::tiny_config(true, 4);
  DiffusionTransformer<double> m(c);
  test::perturb_parameters(m, 41);
  auto q = test::tiny_query<double>(c, 1, 4, 5);
  const auto target = test::random_volume<double>(q.x_t.shape(), 6);
  auto f = [&](const TensorD& x) {
    auto qq = q;
    qq.x_t = x;
    return ad::mse(m.predict_noise(qq, 1000), target);
  };
  const auto r = ad::finite_diff_check<double>(f, q.x_t, 1e-5);
  EXPECT_LT(r.max_rel_error, 1e-4) << r.worst_index;
  const auto pr = test::parameter_finite_diff(m, [&] { return f(q.x_t); }, 1e-5, 4, 7);
  EXPECT_LT(pr.max_rel_error, 1e-4) << pr.worst;
}

TEST(Checkpoint, SaveLoadRoundTrip) {
  const auto c = test::tiny_config();
  DiffusionTransformer<float> a(c), b(c);
  test::perturb_parameters(a, 1);
  TensorArchive ar;
  a.save(ar);
  b.load(TensorArchive::deserialize(ar.serialize()));
  for (const auto& [name, p] : a.parameters()) {
    const auto& q = b.parameters().at(name);
    EXPECT_TRUE(std::equal(p.data().begin(), p.data().end(), q.data().begin())) << name;
  }
  DiffusionTransformer<float> other(test::tiny_config(false));
  EXPECT_THROW(other.load(ar), IoError);
}

TEST(Ablation, NeutralModulationHasNoModulationParameters) {
  DiffusionTransformer<float> m(test::tiny_config(false));
  for (const auto& [name, p] : m.parameters()) EXPECT_EQ(name.find(".mod."), std::string::npos) << name;
  const auto bv = Tensor<float>::constant({1, 1, 3}, {0, 0, 1});
  const auto mods = m.modulation(0, bv, Tensor<float>::zeros({1, 8}));
  for (float v : mods.gate_attn.data()) EXPECT_EQ(v, 1.0f);
  for (float v : mods.scale_mlp.data()) EXPECT_EQ(v, 0.0f);
}

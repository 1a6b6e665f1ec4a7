#include <doctest.h>

#include <cmath>
#include <numbers>

#include "lglab/errors.hpp"
#include "lglab/rng.hpp"
#include "lglab/vaegan.hpp"

using namespace lglab;
using namespace lglab::vaegan;
using ad::Tape;
using ad::Tensor;
using ad::Var;

namespace {

std::vector<Image> random_images(int n, int side, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> out;
  for (int i = 0; i < n; ++i) {
    Image img(side, side);
    for (double& v : img.pixels) v = rng.uniform();
    out.push_back(std::move(img));
  }
  return out;
}

Architecture small_arch() {
  Architecture a;
  a.image_size = 16;
  a.channels = {4, 6};
  a.latent_dim = 5;
  a.feature_layer = 2;
  return a;
}

template <typename T>
void zero(ad::ParamStore<T>& p, const std::string& name) {
  for (T& v : p.mutable_values(name)) v = T(0);
}

Tensor<double> vec_tensor(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor<double>({1, n}, std::move(v));
}

}  // namespace

TEST_CASE("architecture validation and shapes") {
  Architecture a;
  CHECK_NOTHROW(a.validate());
  CHECK(a.bottleneck_side() == 4);
  CHECK(a.flat_size() == 64 * 16);
  CHECK(a.feature_shape() == ad::Shape{64, 4, 4});
  a.feature_layer = 4;
  CHECK_THROWS_AS(a.validate(), ValidationError);
  a.feature_layer = 3;
  a.image_size = 20;
  CHECK_THROWS_AS(a.validate(), ValidationError);
}

TEST_CASE("init_model is seeded and decoder output matches input shape") {
  const auto a = init_model<float>(Architecture{}, 3);
  const auto b = init_model<float>(Architecture{}, 3);
  const auto c = init_model<float>(Architecture{}, 4);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == c.params);
  for (const auto& name : a.params.names()) {
    CHECK((name.rfind("enc.", 0) == 0 || name.rfind("dec.", 0) == 0 || name.rfind("dis.", 0) == 0));
  }
  const auto images = decode(a, std::vector<LatentCode>{LatentCode{std::vector<double>(32, 0.1)}});
  CHECK(images[0].width == 32);
  CHECK(images[0].height == 32);
}

TEST_CASE("encode: zero heads give the standard posterior; identical inputs agree") {
  auto model = init_model<double>(small_arch(), 1);
  for (const char* n : {"enc.mu.w", "enc.mu.b", "enc.logvar.w", "enc.logvar.b"}) zero(model.params, n);
  auto images = random_images(3, 16, 2);
  images.push_back(images[0]);
  const auto post = encode(model, images);
  REQUIRE(post.size() == 4);
  for (const auto& p : post) {
    for (double v : p.mu) CHECK(v == 0.0);
    for (double v : p.logvar) CHECK(v == 0.0);
  }
  const auto trained = init_model<double>(small_arch(), 1);
  const auto q = encode(trained, images);
  CHECK(q[0].mu == q[3].mu);
  CHECK(q[0].logvar == q[3].logvar);
  CHECK_THROWS_AS(encode(trained, random_images(1, 32, 3)), ValidationError);
}

TEST_CASE("encode: logvar stays clamped") {
  auto model = init_model<double>(small_arch(), 1);
  for (double& v : model.params.mutable_values("enc.logvar.b")) v = 50.0;
  for (const auto& p : encode(model, random_images(2, 16, 4))) {
    for (double v : p.logvar) CHECK(v == kLogvarMax);
  }
}

TEST_CASE("sample_latent") {
  LatentPosterior p{{0.3, -1.2}, {kLogvarMin, kLogvarMin}};
  const std::vector<double> noise{2.0, -3.0};
  const auto z = sample_latent(p, noise);
  for (int i = 0; i < 2; ++i) CHECK(std::abs(z.z[i] - p.mu[i]) <= std::exp(-5.0) * std::abs(noise[i]) * (1 + 1e-12));

  LatentPosterior standard{{0.0, 0.0}, {0.0, 0.0}};
  CHECK(sample_latent(standard, noise).z == noise);
  CHECK_THROWS_AS(sample_latent(standard, std::vector<double>{1.0}), ValidationError);

  LatentPosterior q{{1.5, -0.5, 0.0}, {0.4, -1.0, 1.0}};
  Rng rng(5);
  const int n = 100000;
  std::vector<double> mean(3, 0.0);
  for (int i = 0; i < n; ++i) {
    const std::vector<double> e{rng.normal(), rng.normal(), rng.normal()};
    const auto s = sample_latent(q, e);
    for (int j = 0; j < 3; ++j) mean[j] += s.z[j] / n;
  }
  for (int j = 0; j < 3; ++j) {
    const double sigma = std::exp(0.5 * q.logvar[j]);
    CHECK(std::abs(mean[j] - q.mu[j]) < 3 * sigma / std::sqrt(double(n)));
  }
}

TEST_CASE("decode: outputs lie in [0, 1] and are deterministic") {
  const auto model = init_model<float>(Architecture{}, 6);
  Rng rng(7);
  std::vector<LatentCode> codes(10);
  for (auto& c : codes) {
    c.z.resize(32);
    for (double& v : c.z) v = rng.normal();
  }
  codes.push_back(codes[0]);
  const auto images = decode(model, codes);
  for (const auto& img : images) {
    for (double v : img.pixels) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  CHECK(images[0] == images[10]);
  CHECK_THROWS_AS(decode(model, std::vector<LatentCode>{LatentCode{{1.0}}}), ValidationError);
}

TEST_CASE("discriminate: zero head, determinism, feature shape") {
  auto model = init_model<double>(small_arch(), 8);
  auto images = random_images(2, 16, 9);
  images.push_back(images[1]);
  const auto d = discriminate(model, images);
  const auto& fs = model.arch.feature_shape();
  CHECK(d.features.shape() == ad::Shape{3, fs[0], fs[1], fs[2]});
  const std::size_t per = d.features.size() / 3;
  for (std::size_t k = 0; k < per; ++k) CHECK(d.features[per + k] == d.features[2 * per + k]);
  CHECK(d.probability[1] == d.probability[2]);
  zero(model.params, "dis.head.w");
  zero(model.params, "dis.head.b");
  for (double p : discriminate(model, images).probability) CHECK(p == 0.5);
}

TEST_CASE("loss_prior") {
  {
    Tape<double> t;
    CHECK(t.value(loss_prior(t, t.constant(Tensor<double>({2, 3})), t.constant(Tensor<double>({2, 3})), 7.0))[0] == 0.0);
  }
  // KL(N(1, 1) || N(0, 1)) = integral of q(z) (log q(z) - log p(z)) dz, by Simpson's rule.
  const double lo = -14.0, hi = 16.0;
  const int n = 20000;
  const double h = (hi - lo) / n;
  auto integrand = [](double z) {
    const double log_q = -0.5 * (z - 1) * (z - 1) - 0.5 * std::log(2 * std::numbers::pi);
    const double log_p = -0.5 * z * z - 0.5 * std::log(2 * std::numbers::pi);
    return std::exp(log_q) * (log_q - log_p);
  };
  double kl = integrand(lo) + integrand(hi);
  for (int i = 1; i < n; ++i) kl += (i % 2 ? 4.0 : 2.0) * integrand(lo + i * h);
  kl *= h / 3;
  Tape<double> t;
  const double v1 = t.value(loss_prior(t, t.constant(vec_tensor({1.0})), t.constant(vec_tensor({0.0})), 1.0))[0];
  CHECK(v1 == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::abs(v1 - kl) < 1e-9);
  const Var mu = t.constant(vec_tensor({0.3, -0.8})), lv = t.constant(vec_tensor({0.5, -1.5}));
  CHECK(t.value(loss_prior(t, mu, lv, 2.0))[0] == doctest::Approx(2 * t.value(loss_prior(t, mu, lv, 1.0))[0]).epsilon(1e-15));
}

TEST_CASE("loss_like") {
  Tape<double> t;
  const Var f = t.constant(Tensor<double>({1, 4}, 0.7));
  CHECK(t.value(loss_like(t, f, f))[0] == 0.0);
  CHECK(t.value(loss_like(t, t.constant(vec_tensor({1, 0, 0, 0})), t.constant(vec_tensor({0, 0, 0, 0}))))[0] == 0.5);
  CHECK_THROWS_AS(loss_like(t, t.constant(Tensor<double>({1, 3})), t.constant(Tensor<double>({1, 4}))), ValidationError);

  // -log N(f_r | f_x, I) without the (n/2) log(2 pi) term.
  Rng rng(10);
  std::vector<double> a(12), b(12);
  for (auto& v : a) v = rng.normal();
  for (auto& v : b) v = rng.normal();
  long double log_density = 0;
  for (int i = 0; i < 12; ++i) {
    const long double d = a[i] - b[i];
    log_density += std::log(std::exp(-d * d / 2) / std::sqrt(2 * std::numbers::pi_v<long double>));
  }
  const long double expected = -log_density - 6 * std::log(2 * std::numbers::pi_v<long double>);
  CHECK(std::abs(t.value(loss_like(t, t.constant(vec_tensor(a)), t.constant(vec_tensor(b))))[0] - double(expected)) < 1e-9);
}

TEST_CASE("loss_gan") {
  Tape<double> t;
  const Var half = t.constant(Tensor<double>({3, 1}, 0.5));
  CHECK(std::abs(t.value(loss_gan(t, half, half, half))[0] - 3 * std::numbers::ln2) < 1e-12);

  const double eps = kLogEps;
  const double perfect = t.value(loss_gan(t, t.constant(Tensor<double>({2, 1}, 1 - eps)),
                                          t.constant(Tensor<double>({2, 1}, eps)),
                                          t.constant(Tensor<double>({2, 1}, eps))))[0];
  CHECK(perfect == doctest::Approx(3 * eps).epsilon(1e-6));

  // Independent extended-precision evaluation of the clamped formula, including
  // values at and beyond the clamp.
  Rng rng(11);
  std::vector<double> pr(9), pp(9), pq(9);
  for (int i = 0; i < 9; ++i) {
    pr[i] = rng.uniform();
    pp[i] = rng.uniform();
    pq[i] = rng.uniform();
  }
  pr[0] = 0.0;
  pp[1] = 1.0;
  pq[2] = 1 - 1e-9;
  auto clog = [&](long double x) { return std::log(std::max<long double>(x, eps)); };
  long double sum = 0;
  for (int i = 0; i < 9; ++i) sum += clog(pr[i]) + clog(1.0L - pp[i]) + clog(1.0L - pq[i]);
  auto col = [](const std::vector<double>& v) { return Tensor<double>({9, 1}, v); };
  const double got = t.value(loss_gan(t, t.constant(col(pr)), t.constant(col(pp)), t.constant(col(pq))))[0];
  CHECK(std::abs(got - double(-sum / 9)) < 1e-12);
  CHECK(got >= 0);
}

namespace {

struct Toy {
  ModelTriple<double> model = init_model<double>(small_arch(), 12);
  Tensor<double> batch = vaegan::images_to_tensor_as<double>(random_images(4, 16, 13));
  Tensor<double> eps{{4, 5}}, zp{{4, 5}};
  Toy() {
    Rng rng(14);
    for (double& v : eps.values()) v = rng.normal();
    for (double& v : zp.values()) v = rng.normal();
  }
};

}  // namespace

TEST_CASE("train_step: zero learning rates leave the model but report losses") {
  Toy toy;
  TrainingConfig cfg;
  cfg.latent_dim = 5;
  cfg.lr_encoder = cfg.lr_decoder = cfg.lr_discriminator = 0.0;
  auto state = make_trainer_state<double>(cfg);
  const auto before = toy.model.params;
  const auto losses = train_step(toy.model, state, toy.batch, toy.eps, toy.zp, cfg);
  CHECK(toy.model.params == before);
  CHECK(losses.l_prior >= 0);
  CHECK(losses.l_like > 0);
  CHECK(losses.l_gan > 0);
  CHECK_THROWS_AS(train_step(toy.model, state, toy.batch, Tensor<double>({4, 4}), toy.zp, cfg), ValidationError);
}

TEST_CASE("train_step: discriminator-only updates drive L_GAN down") {
  Toy toy;
  TrainingConfig cfg;
  cfg.latent_dim = 5;
  cfg.lr_encoder = cfg.lr_decoder = 0.0;
  auto state = make_trainer_state<double>(cfg);
  std::vector<double> history;
  for (int i = 0; i < 51; ++i) history.push_back(train_step(toy.model, state, toy.batch, toy.eps, toy.zp, cfg).l_gan);
  int non_monotone = 0;
  for (std::size_t i = 1; i < history.size(); ++i) non_monotone += history[i] >= history[i - 1];
  CHECK(non_monotone <= 5);
  CHECK(history.back() < history.front());
}

TEST_CASE("route_gradients: L_GAN alone never reaches the encoder") {
  Toy toy;
  const auto& a = toy.model.arch;
  const auto& p = toy.model.params;
  Tape<double> tape;
  const Var x = tape.constant(toy.batch);
  const auto enc = encoder_graph(tape, a, p, x);
  const Var recon = decoder_graph(tape, a, p, tape.gaussian_sample(enc.mu, enc.logvar, toy.eps));
  const Var prior = decoder_graph(tape, a, p, tape.constant(toy.zp));
  LossTerms terms;
  terms.gan = loss_gan(tape, discriminator_graph(tape, a, p, x).probability,
                       discriminator_graph(tape, a, p, prior).probability,
                       discriminator_graph(tape, a, p, recon).probability);
  const auto direct = tape.backward(terms.gan);
  const auto routed = route_gradients(tape, p, terms, 1e-2);
  double direct_enc = 0;
  for (const auto& [name, g] : routed.encoder) {
    for (double v : g.values()) CHECK(v == 0.0);
    for (double v : direct.at(name).values()) direct_enc += std::abs(v);
  }
  CHECK(direct_enc > 0);  // L_GAN does depend on the encoder through x_recon
  for (const auto& [name, g] : routed.decoder) {
    CHECK(name.rfind("dec.", 0) == 0);
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g[i] == -direct.at(name)[i]);
  }
  for (const auto& [name, g] : routed.discriminator) CHECK(g == direct.at(name));
  CHECK(routed.encoder.size() + routed.decoder.size() + routed.discriminator.size() == p.size());
}

TEST_CASE("fit: epochs = 0 and determinism") {
  const auto data = random_images(10, 16, 15);
  TrainingConfig cfg;
  cfg.latent_dim = 5;
  cfg.epochs = 0;
  Architecture arch = cfg.architecture(16);
  const auto none = fit(data, cfg, 16);
  CHECK(none.history.empty());
  CHECK(none.model.params == init_model<float>(arch, cfg.seed).params);

  cfg.epochs = 2;
  cfg.batch_size = 4;
  int calls = 0;
  const auto r1 = fit(data, cfg, 16, [&](const ModelTriple<float>&, int epoch) { CHECK(epoch == calls++); });
  const auto r2 = fit(data, cfg, 16);
  CHECK(calls == 2);
  REQUIRE(r1.history.size() == 6);  // 3 batches per epoch, the last one partial
  for (std::size_t i = 0; i < r1.history.size(); ++i) {
    CHECK(r1.history[i].l_prior == r2.history[i].l_prior);
    CHECK(r1.history[i].l_like == r2.history[i].l_like);
    CHECK(r1.history[i].l_gan == r2.history[i].l_gan);
  }
  CHECK(r1.model.params == r2.model.params);
  CHECK_THROWS_AS(fit({}, cfg, 16), ValidationError);
}

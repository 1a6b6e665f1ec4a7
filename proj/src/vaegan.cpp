#include "lglab/vaegan.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "lglab/csv.hpp"
#include "lglab/errors.hpp"
#include "lglab/rng.hpp"

namespace lglab::vaegan {

using ad::Shape;
using ad::Tape;
using ad::Tensor;
using ad::Var;

void Architecture::validate() const {
  if (channels.empty()) throw ValidationError("architecture needs at least one conv stage");
  for (const int c : channels) {
    if (c < 1) throw ValidationError("architecture channel counts must be positive");
  }
  if (kernel != 4) throw ValidationError("architecture kernel must be 4 (stride-2 halving)");
  const int stages = static_cast<int>(channels.size());
  if (image_size < (1 << stages) || image_size % (1 << stages) != 0) {
    throw ValidationError("image_size must be divisible by 2^stages");
  }
  if (latent_dim < 1) throw ValidationError("latent_dim must be >= 1");
  if (feature_layer < 1 || feature_layer > stages) {
    throw ValidationError("feature_layer must lie in [1, " + std::to_string(stages) + "]");
  }
  if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) {
    throw ValidationError("leaky_slope must lie in [0, 1)");
  }
}

int Architecture::bottleneck_side() const {
  return image_size >> channels.size();
}

int Architecture::flat_size() const {
  return channels.back() * bottleneck_side() * bottleneck_side();
}

Shape Architecture::feature_shape() const {
  const int side = image_size >> feature_layer;
  return {channels[feature_layer - 1], side, side};
}

namespace {

std::string stage_name(const std::string& prefix, const char* kind, std::size_t i) {
  return prefix + "." + kind + std::to_string(i + 1);
}

template <typename T>
void add_uniform(ad::ParamStore<T>& store, const std::string& name, Shape shape,
                 double fan_in, double slope, Rng& rng) {
  const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
  Tensor<T> w(std::move(shape));
  for (T& v : w.values()) v = static_cast<T>(rng.uniform(-bound, bound));
  store.add(name, std::move(w));
}

template <typename T>
void add_zeros(ad::ParamStore<T>& store, const std::string& name, Shape shape) {
  store.add(name, Tensor<T>(std::move(shape)));
}

}  // namespace

template <typename T>
ModelTriple<T> init_model(const Architecture& arch, std::uint64_t seed) {
  arch.validate();
  ModelTriple<T> model{arch, {}};
  auto& p = model.params;
  Rng rng(mix_seed(seed, 0x1417ULL));
  const int k = arch.kernel;
  const double slope = arch.leaky_slope;
  const int flat = arch.flat_size();
  const int d = arch.latent_dim;
  const std::size_t stages = arch.channels.size();

  for (const std::string net : {"enc", "dis"}) {
    int in_c = 1;
    for (std::size_t i = 0; i < stages; ++i) {
      const int out_c = arch.channels[i];
      add_uniform(p, stage_name(net, "conv", i) + ".w", {out_c, in_c, k, k},
                  in_c * k * k, slope, rng);
      add_zeros(p, stage_name(net, "conv", i) + ".b", {out_c});
      in_c = out_c;
    }
  }
  add_uniform(p, "enc.mu.w", {d, flat}, flat, slope, rng);
  add_zeros(p, "enc.mu.b", {d});
  add_uniform(p, "enc.logvar.w", {d, flat}, flat, slope, rng);
  add_zeros(p, "enc.logvar.b", {d});
  add_uniform(p, "dis.head.w", {1, flat}, flat, slope, rng);
  add_zeros(p, "dis.head.b", {1});

  add_uniform(p, "dec.fc.w", {flat, d}, d, slope, rng);
  add_zeros(p, "dec.fc.b", {flat});
  for (std::size_t i = 0; i < stages; ++i) {
    const std::size_t from = stages - 1 - i;
    const int in_c = arch.channels[from];
    const int out_c = from == 0 ? 1 : arch.channels[from - 1];
    // Each transposed-conv output sees k^2 / stride^2 taps per input channel.
    add_uniform(p, stage_name("dec", "deconv", i) + ".w", {in_c, out_c, k, k},
                in_c * k * k / 4.0, slope, rng);
    add_zeros(p, stage_name("dec", "deconv", i) + ".b", {out_c});
  }
  return model;
}

template <typename T>
EncoderVars encoder_graph(Tape<T>& tape, const Architecture& a, const ad::ParamStore<T>& p, Var x) {
  const int n = tape.value(x).dim(0);
  Var h = x;
  for (std::size_t i = 0; i < a.channels.size(); ++i) {
    const std::string base = stage_name("enc", "conv", i);
    h = tape.conv2d(h, tape.param(p, base + ".w"), tape.param(p, base + ".b"), 2, 1);
    h = tape.leaky_relu(h, static_cast<T>(a.leaky_slope));
  }
  h = tape.reshape(h, {n, a.flat_size()});
  EncoderVars out;
  out.mu = tape.dense(h, tape.param(p, "enc.mu.w"), tape.param(p, "enc.mu.b"));
  out.logvar = tape.clamp(
      tape.dense(h, tape.param(p, "enc.logvar.w"), tape.param(p, "enc.logvar.b")),
      static_cast<T>(kLogvarMin), static_cast<T>(kLogvarMax));
  return out;
}

template <typename T>
Var decoder_graph(Tape<T>& tape, const Architecture& a, const ad::ParamStore<T>& p, Var z) {
  const auto& zs = tape.value(z).shape();
  if (zs.size() != 2 || zs[1] != a.latent_dim) {
    throw ValidationError("decode: latent dim mismatch, expected " +
                          std::to_string(a.latent_dim) + ", got " + ad::shape_string(zs));
  }
  const int n = zs[0];
  const int side = a.bottleneck_side();
  Var h = tape.dense(z, tape.param(p, "dec.fc.w"), tape.param(p, "dec.fc.b"));
  h = tape.leaky_relu(h, static_cast<T>(a.leaky_slope));
  h = tape.reshape(h, {n, a.channels.back(), side, side});
  const std::size_t stages = a.channels.size();
  for (std::size_t i = 0; i < stages; ++i) {
    const std::string base = stage_name("dec", "deconv", i);
    h = tape.conv2d_transpose(h, tape.param(p, base + ".w"), tape.param(p, base + ".b"), 2, 1);
    h = i + 1 < stages ? tape.leaky_relu(h, static_cast<T>(a.leaky_slope)) : tape.sigmoid(h);
  }
  return h;
}

template <typename T>
DiscriminatorVars discriminator_graph(Tape<T>& tape, const Architecture& a, const ad::ParamStore<T>& p, Var x) {
  const int n = tape.value(x).dim(0);
  DiscriminatorVars out;
  Var h = x;
  for (std::size_t i = 0; i < a.channels.size(); ++i) {
    const std::string base = stage_name("dis", "conv", i);
    h = tape.conv2d(h, tape.param(p, base + ".w"), tape.param(p, base + ".b"), 2, 1);
    h = tape.leaky_relu(h, static_cast<T>(a.leaky_slope));
    if (static_cast<int>(i) + 1 == a.feature_layer) out.features = h;
  }
  h = tape.reshape(h, {n, a.flat_size()});
  out.probability =
      tape.sigmoid(tape.dense(h, tape.param(p, "dis.head.w"), tape.param(p, "dis.head.b")));
  return out;
}

namespace {
template <typename T>
Var per_batch_mean(Tape<T>& tape, Var v, int batch, double scale) {
  return tape.affine(tape.sum(v), static_cast<T>(scale / batch), T(0));
}
}  // namespace

template <typename T>
Var loss_prior(Tape<T>& tape, Var mu, Var logvar, double beta) {
  const int n = tape.value(mu).dim(0);
  // mu^2 + exp(logvar) - logvar - 1, halved
  Var terms = tape.add(tape.square(mu), tape.sub(tape.exp(logvar), logvar));
  terms = tape.affine(terms, T(0.5), T(-0.5));
  return per_batch_mean(tape, terms, n, beta);
}

template <typename T>
Var loss_like(Tape<T>& tape, Var features_real, Var features_recon) {
  if (tape.value(features_real).shape() != tape.value(features_recon).shape()) {
    throw ValidationError("loss_like: feature shapes differ");
  }
  const int n = tape.value(features_real).dim(0);
  return per_batch_mean(tape, tape.square(tape.sub(features_real, features_recon)), n, 0.5);
}

template <typename T>
Var loss_gan(Tape<T>& tape, Var p_real, Var p_fake_prior, Var p_fake_recon) {
  const int n = tape.value(p_real).dim(0);
  const T eps = static_cast<T>(kLogEps);
  Var real = tape.sum(tape.log(p_real, eps));
  Var prior = tape.sum(tape.log(tape.affine(p_fake_prior, T(-1), T(1)), eps));
  Var recon = tape.sum(tape.log(tape.affine(p_fake_recon, T(-1), T(1)), eps));
  Var total = tape.add(tape.add(real, prior), recon);
  return tape.affine(total, static_cast<T>(-1.0 / n), T(0));
}

template <typename T>
Tensor<T> images_to_tensor_as(std::span<const Image> images) {
  if (images.empty()) throw ValidationError("empty image batch");
  const int width = images.front().width;
  const int height = images.front().height;
  Tensor<T> out({static_cast<int>(images.size()), 1, height, width});
  std::size_t offset = 0;
  for (const Image& img : images) {
    if (img.width != width || img.height != height) {
      throw ValidationError("image batch has mixed sizes");
    }
    for (const double v : img.pixels) out[offset++] = static_cast<T>(v);
  }
  return out;
}

Tensor<float> images_to_tensor(std::span<const Image> images) {
  return images_to_tensor_as<float>(images);
}

std::vector<Image> tensor_to_images(const Tensor<float>& batch) {
  const int n = batch.dim(0), h = batch.dim(2), w = batch.dim(3);
  std::vector<Image> out;
  std::size_t offset = 0;
  for (int i = 0; i < n; ++i) {
    Image img(w, h);
    for (double& v : img.pixels) v = batch[offset++];
    out.push_back(std::move(img));
  }
  return out;
}

namespace {
constexpr std::size_t kEvalChunk = 64;

template <typename T>
void check_images(const Architecture& a, std::span<const Image> images) {
  for (const Image& img : images) {
    if (img.width != a.image_size || img.height != a.image_size) {
      throw ValidationError("image shape " + std::to_string(img.width) + "x" +
                            std::to_string(img.height) + " does not match architecture size " +
                            std::to_string(a.image_size));
    }
  }
}
}  // namespace

template <typename T>
std::vector<LatentPosterior> encode(const ModelTriple<T>& model, std::span<const Image> images) {
  check_images<T>(model.arch, images);
  std::vector<LatentPosterior> out;
  const int d = model.arch.latent_dim;
  for (std::size_t begin = 0; begin < images.size(); begin += kEvalChunk) {
    const auto chunk = images.subspan(begin, std::min(kEvalChunk, images.size() - begin));
    Tape<T> tape;
    const EncoderVars e =
        encoder_graph(tape, model.arch, model.params, tape.constant(images_to_tensor_as<T>(chunk)));
    const auto& mu = tape.value(e.mu);
    const auto& lv = tape.value(e.logvar);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      LatentPosterior post;
      post.mu.assign(mu.data() + i * d, mu.data() + (i + 1) * d);
      post.logvar.assign(lv.data() + i * d, lv.data() + (i + 1) * d);
      out.push_back(std::move(post));
    }
  }
  return out;
}

LatentCode sample_latent(const LatentPosterior& posterior, std::span<const double> noise) {
  if (noise.size() != posterior.mu.size() || posterior.logvar.size() != posterior.mu.size()) {
    throw ValidationError("sample_latent: noise dim does not match posterior dim");
  }
  LatentCode code;
  code.z.resize(noise.size());
  for (std::size_t i = 0; i < noise.size(); ++i) {
    code.z[i] = posterior.mu[i] + std::exp(0.5 * posterior.logvar[i]) * noise[i];
  }
  return code;
}

template <typename T>
std::vector<Image> decode(const ModelTriple<T>& model, std::span<const LatentCode> codes) {
  const int d = model.arch.latent_dim;
  std::vector<Image> out;
  for (std::size_t begin = 0; begin < codes.size(); begin += kEvalChunk) {
    const std::size_t count = std::min(kEvalChunk, codes.size() - begin);
    Tensor<T> z({static_cast<int>(count), d});
    for (std::size_t i = 0; i < count; ++i) {
      const auto& code = codes[begin + i].z;
      if (static_cast<int>(code.size()) != d) {
        throw ValidationError("decode: latent dim mismatch, expected " + std::to_string(d));
      }
      for (int j = 0; j < d; ++j) z[i * d + j] = static_cast<T>(code[j]);
    }
    Tape<T> tape;
    const auto& x = tape.value(decoder_graph(tape, model.arch, model.params, tape.constant(std::move(z))));
    const int side = model.arch.image_size;
    for (std::size_t i = 0; i < count; ++i) {
      Image img(side, side);
      for (std::size_t k = 0; k < img.size(); ++k) img.pixels[k] = x[i * img.size() + k];
      out.push_back(std::move(img));
    }
  }
  return out;
}

template <typename T>
Discrimination discriminate(const ModelTriple<T>& model, std::span<const Image> images) {
  check_images<T>(model.arch, images);
  Tape<T> tape;
  const DiscriminatorVars d =
      discriminator_graph(tape, model.arch, model.params, tape.constant(images_to_tensor_as<T>(images)));
  Discrimination out;
  for (const T p : tape.value(d.probability).values()) out.probability.push_back(p);
  out.features = tape.value(d.features).template cast<double>();
  return out;
}

void TrainingConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0) || !std::isfinite(v)) {
      throw ValidationError(std::string(name) + " must be > 0");
    }
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0) || !std::isfinite(v)) {
      throw ValidationError(std::string(name) + " must be >= 0");
    }
  };
  if (latent_dim < 1) throw ValidationError("latent_dim must be >= 1");
  if (batch_size < 1) throw ValidationError("batch_size must be >= 1");
  if (epochs < 0) throw ValidationError("epochs must be >= 0");
  non_negative(lr_encoder, "lr_encoder");
  non_negative(lr_decoder, "lr_decoder");
  non_negative(lr_discriminator, "lr_discriminator");
  positive(gamma, "gamma");
  positive(beta, "beta");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0)) throw ValidationError("adam_beta1 must lie in [0, 1)");
  if (!(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) throw ValidationError("adam_beta2 must lie in [0, 1)");
}

Architecture TrainingConfig::architecture(int image_size) const {
  Architecture a;
  a.image_size = image_size;
  a.latent_dim = latent_dim;
  a.feature_layer = feature_layer;
  a.validate();
  return a;
}

template <typename T>
TrainerState<T> make_trainer_state(const TrainingConfig& config) {
  auto make = [&](double lr) {
    ad::OptimizerState<T> s;
    s.config.kind = config.optimizer;
    s.config.learning_rate = lr;
    s.config.beta1 = config.adam_beta1;
    s.config.beta2 = config.adam_beta2;
    return s;
  };
  return {make(config.lr_encoder), make(config.lr_decoder), make(config.lr_discriminator)};
}

namespace {
template <typename T>
ad::GradMap<T> zeros_with_prefix(const ad::ParamStore<T>& params, const std::string& prefix) {
  ad::GradMap<T> out;
  for (const auto& [name, value] : params) {
    if (name.rfind(prefix, 0) == 0) out.emplace(name, Tensor<T>(value.shape()));
  }
  return out;
}

ad::ParamFilter prefix_filter(std::string prefix) {
  return [prefix = std::move(prefix)](const std::string& name) {
    return name.rfind(prefix, 0) == 0;
  };
}

bool present(Var v) { return v.id >= 0; }
}  // namespace

template <typename T>
RoutedGradients<T> route_gradients(Tape<T>& tape, const ad::ParamStore<T>& params,
                                   const LossTerms& terms, double gamma) {
  RoutedGradients<T> out;

  Var encoder_loss;
  if (present(terms.prior) && present(terms.like)) {
    encoder_loss = tape.add(terms.prior, terms.like);
  } else {
    encoder_loss = present(terms.prior) ? terms.prior : terms.like;
  }
  out.encoder = present(encoder_loss) ? tape.backward(encoder_loss, prefix_filter("enc."))
                                      : zeros_with_prefix(params, "enc.");

  Var decoder_loss;
  if (present(terms.like) && present(terms.gan)) {
    decoder_loss = tape.sub(tape.affine(terms.like, static_cast<T>(gamma), T(0)), terms.gan);
  } else if (present(terms.like)) {
    decoder_loss = tape.affine(terms.like, static_cast<T>(gamma), T(0));
  } else if (present(terms.gan)) {
    decoder_loss = tape.affine(terms.gan, T(-1), T(0));
  }
  out.decoder = present(decoder_loss) ? tape.backward(decoder_loss, prefix_filter("dec."))
                                      : zeros_with_prefix(params, "dec.");

  out.discriminator = present(terms.gan) ? tape.backward(terms.gan, prefix_filter("dis."))
                                         : zeros_with_prefix(params, "dis.");
  return out;
}

template <typename T>
LossBreakdown train_step(ModelTriple<T>& model, TrainerState<T>& state,
                         const Tensor<T>& batch, const Tensor<T>& posterior_noise,
                         const Tensor<T>& prior_noise, const TrainingConfig& config) {
  const int n = batch.dim(0);
  if (n < 1) throw ValidationError("train_step: empty batch");
  const Shape latent_shape{n, model.arch.latent_dim};
  if (posterior_noise.shape() != latent_shape || prior_noise.shape() != latent_shape) {
    throw ValidationError("train_step: noise must be [batch, latent_dim]");
  }
  Tape<T> tape;
  const Var x = tape.constant(batch);
  const EncoderVars enc = encoder_graph(tape, model.arch, model.params, x);
  const Var z = tape.gaussian_sample(enc.mu, enc.logvar, posterior_noise);
  const Var x_recon = decoder_graph(tape, model.arch, model.params, z);
  const Var x_prior = decoder_graph(tape, model.arch, model.params, tape.constant(prior_noise));
  const DiscriminatorVars d_real = discriminator_graph(tape, model.arch, model.params, x);
  const DiscriminatorVars d_recon = discriminator_graph(tape, model.arch, model.params, x_recon);
  const DiscriminatorVars d_prior = discriminator_graph(tape, model.arch, model.params, x_prior);

  LossTerms terms;
  terms.prior = loss_prior(tape, enc.mu, enc.logvar, config.beta);
  terms.like = loss_like(tape, d_real.features, d_recon.features);
  terms.gan = loss_gan(tape, d_real.probability, d_prior.probability, d_recon.probability);

  LossBreakdown out;
  out.l_prior = tape.value(terms.prior)[0];
  out.l_like = tape.value(terms.like)[0];
  out.l_gan = tape.value(terms.gan)[0];
  if (!std::isfinite(out.l_prior)) throw OverflowError("training aborted: L_prior is non-finite");
  if (!std::isfinite(out.l_like)) throw OverflowError("training aborted: L_like is non-finite");
  if (!std::isfinite(out.l_gan)) throw OverflowError("training aborted: L_GAN is non-finite");

  const RoutedGradients<T> grads = route_gradients(tape, model.params, terms, config.gamma);
  ad::optimizer_step(model.params, grads.encoder, state.encoder);
  ad::optimizer_step(model.params, grads.decoder, state.decoder);
  ad::optimizer_step(model.params, grads.discriminator, state.discriminator);
  return out;
}

FitResult fit(std::span<const Image> dataset, const TrainingConfig& config, int image_size,
              const EpochCallback& on_epoch) {
  config.validate();
  if (dataset.empty()) throw ValidationError("fit: empty dataset");
  const Architecture arch = config.architecture(image_size);
  FitResult result{init_model<float>(arch, config.seed), {}};
  TrainerState<float> state = make_trainer_state<float>(config);
  Rng rng(mix_seed(config.seed, 0xF17ULL));
  const int d = arch.latent_dim;

  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle(order, rng);
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t count =
          std::min<std::size_t>(config.batch_size, order.size() - begin);
      std::vector<Image> batch;
      batch.reserve(count);
      for (std::size_t i = 0; i < count; ++i) batch.push_back(dataset[order[begin + i]]);
      const int n = static_cast<int>(count);
      Tensor<float> eps({n, d}), zp({n, d});
      for (float& v : eps.values()) v = static_cast<float>(rng.normal());
      for (float& v : zp.values()) v = static_cast<float>(rng.normal());
      LossBreakdown b =
          train_step(result.model, state, images_to_tensor(batch), eps, zp, config);
      b.epoch = epoch;
      b.step = step++;
      result.history.push_back(b);
    }
    if (on_epoch) on_epoch(result.model, epoch);
  }
  return result;
}

void write_loss_history(const std::vector<LossBreakdown>& history,
                        const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot open " + path.string());
  out << "epoch,step,l_prior,l_like,l_gan\n";
  for (const auto& b : history) {
    out << b.epoch << ',' << b.step << ',' << csv::format_real(b.l_prior) << ','
        << csv::format_real(b.l_like) << ',' << csv::format_real(b.l_gan) << '\n';
  }
}

#define LGLAB_INSTANTIATE(T)                                                              \
  template ModelTriple<T> init_model<T>(const Architecture&, std::uint64_t);              \
  template EncoderVars encoder_graph<T>(Tape<T>&, const Architecture&, const ad::ParamStore<T>&, Var);            \
  template Var decoder_graph<T>(Tape<T>&, const Architecture&, const ad::ParamStore<T>&, Var);                    \
  template DiscriminatorVars discriminator_graph<T>(Tape<T>&, const Architecture&, const ad::ParamStore<T>&, Var); \
  template Var loss_prior<T>(Tape<T>&, Var, Var, double);                                 \
  template Var loss_like<T>(Tape<T>&, Var, Var);                                          \
  template Var loss_gan<T>(Tape<T>&, Var, Var, Var);                                      \
  template Tensor<T> images_to_tensor_as<T>(std::span<const Image>);                      \
  template std::vector<LatentPosterior> encode<T>(const ModelTriple<T>&,                  \
                                                  std::span<const Image>);                \
  template std::vector<Image> decode<T>(const ModelTriple<T>&, std::span<const LatentCode>); \
  template Discrimination discriminate<T>(const ModelTriple<T>&, std::span<const Image>); \
  template TrainerState<T> make_trainer_state<T>(const TrainingConfig&);                  \
  template RoutedGradients<T> route_gradients<T>(Tape<T>&, const ad::ParamStore<T>&,      \
                                                 const LossTerms&, double);               \
  template LossBreakdown train_step<T>(ModelTriple<T>&, TrainerState<T>&, const Tensor<T>&, \
                                       const Tensor<T>&, const Tensor<T>&,               \
                                       const TrainingConfig&);

LGLAB_INSTANTIATE(float)
LGLAB_INSTANTIATE(double)

#undef LGLAB_INSTANTIATE

}  // namespace lglab::vaegan

#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lglab/image.hpp"
#include "lglab/optimizer.hpp"
#include "lglab/tape.hpp"

// Encoder / decoder / discriminator triple trained jointly as a VAE whose
// reconstruction error lives in a discriminator feature space, with the
// decoder doubling as the GAN generator.
namespace lglab::vaegan {

inline constexpr double kLogEps = 1e-7;
inline constexpr double kLogvarMin = -10.0;
inline constexpr double kLogvarMax = 10.0;

struct Architecture {
  int image_size = 32;
  std::vector<int> channels = {16, 32, 64};  // per stride-2 conv stage
  int kernel = 4;
  int latent_dim = 32;
  int feature_layer = 3;  // 1-based discriminator conv layer used as Dis_l
  double leaky_slope = 0.2;

  void validate() const;
  int bottleneck_side() const;
  int flat_size() const;  // channels.back() * side^2
  // Per-sample shape [C, H, W] of Dis_l(x).
  ad::Shape feature_shape() const;

  bool operator==(const Architecture&) const = default;
};

template <typename T>
struct ModelTriple {
  Architecture arch;
  ad::ParamStore<T> params;  // "enc.*", "dec.*", "dis.*"

  template <typename U>
  ModelTriple<U> cast() const {
    return ModelTriple<U>{arch, params.template cast<U>()};
  }
};

// Weights uniform in +-sqrt(6 / ((1 + slope^2) * fan_in)), biases zero.
template <typename T>
ModelTriple<T> init_model(const Architecture& arch, std::uint64_t seed);

// Graph builders. Images are [N, 1, S, S]; latents [N, D]. The tape binds to
// `params`, which must outlive it.
struct EncoderVars {
  ad::Var mu, logvar;
};
struct DiscriminatorVars {
  ad::Var probability;  // [N, 1]
  ad::Var features;     // [N, C, H, W] activations of layer l
};

template <typename T>
EncoderVars encoder_graph(ad::Tape<T>& tape, const Architecture& arch,
    const ad::ParamStore<T>& params, ad::Var x);
template <typename T>
ad::Var decoder_graph(ad::Tape<T>& tape, const Architecture& arch,
    const ad::ParamStore<T>& params, ad::Var z);
template <typename T>
DiscriminatorVars discriminator_graph(ad::Tape<T>& tape, const Architecture& arch,
    const ad::ParamStore<T>& params,
                                      ad::Var x);

// beta * batch-mean of 1/2 sum_d (mu^2 + exp(logvar) - 1 - logvar)
template <typename T>
ad::Var loss_prior(ad::Tape<T>& tape, ad::Var mu, ad::Var logvar, double beta);
// batch-mean of 1/2 ||f_real - f_recon||^2
template <typename T>
ad::Var loss_like(ad::Tape<T>& tape, ad::Var features_real, ad::Var features_recon);
// -batch-mean of [log p_real + log(1 - p_prior) + log(1 - p_recon)], logs
// clamped at kLogEps.
template <typename T>
ad::Var loss_gan(ad::Tape<T>& tape, ad::Var p_real, ad::Var p_fake_prior,
                 ad::Var p_fake_recon);

// Plain-value API, evaluated on the model without recording gradients.
struct LatentPosterior {
  std::vector<double> mu;
  std::vector<double> logvar;
};
struct LatentCode {
  std::vector<double> z;
};

ad::Tensor<float> images_to_tensor(std::span<const Image> images);
template <typename T>
ad::Tensor<T> images_to_tensor_as(std::span<const Image> images);
std::vector<Image> tensor_to_images(const ad::Tensor<float>& batch);

template <typename T>
std::vector<LatentPosterior> encode(const ModelTriple<T>& model,
                                    std::span<const Image> images);
// z = mu + exp(logvar / 2) * noise
LatentCode sample_latent(const LatentPosterior& posterior, std::span<const double> noise);
template <typename T>
std::vector<Image> decode(const ModelTriple<T>& model, std::span<const LatentCode> codes);

struct Discrimination {
  std::vector<double> probability;
  ad::Tensor<double> features;  // [N, C, H, W]
};
template <typename T>
Discrimination discriminate(const ModelTriple<T>& model, std::span<const Image> images);

struct TrainingConfig {
  int latent_dim = 32;
  int feature_layer = 3;
  int batch_size = 4;
  int epochs = 120;
  double lr_encoder = 5e-4;
  double lr_decoder = 5e-4;
  double lr_discriminator = 5e-4;
  ad::OptimizerKind optimizer = ad::OptimizerKind::adam;
  double adam_beta1 = 0.5;
  double adam_beta2 = 0.999;
  double gamma = 1e-2;  // decoder weight on L_like against the GAN term
  double beta = 1.0;    // weight on the prior term
  std::uint64_t seed = 1;

  void validate() const;
  Architecture architecture(int image_size = 32) const;
};

struct LossBreakdown {
  int epoch = 0;
  int step = 0;
  double l_prior = 0, l_like = 0, l_gan = 0;
};

template <typename T>
struct TrainerState {
  ad::OptimizerState<T> encoder, decoder, discriminator;
};

template <typename T>
TrainerState<T> make_trainer_state(const TrainingConfig& config);

struct LossTerms {
  ad::Var prior, like, gan;  // id < 0 when absent
};

template <typename T>
struct RoutedGradients {
  ad::GradMap<T> encoder, decoder, discriminator;
};

// Encoder: grad(L_prior + L_like); decoder: grad(gamma * L_like - L_GAN);
// discriminator: grad(L_GAN). Each map covers its network's parameters only.
template <typename T>
RoutedGradients<T> route_gradients(ad::Tape<T>& tape, const ad::ParamStore<T>& params,
                                   const LossTerms& terms, double gamma);

// One routed update. `posterior_noise` and `prior_noise` are [N, D] standard
// normal draws. Reports the pre-update loss values.
template <typename T>
LossBreakdown train_step(ModelTriple<T>& model, TrainerState<T>& state,
                         const ad::Tensor<T>& batch,
                         const ad::Tensor<T>& posterior_noise,
                         const ad::Tensor<T>& prior_noise,
                         const TrainingConfig& config);

struct FitResult {
  ModelTriple<float> model;
  std::vector<LossBreakdown> history;
};

using EpochCallback = std::function<void(const ModelTriple<float>&, int epoch)>;

// Epochs of seeded shuffled mini-batches. The dataset carries pixels only.
FitResult fit(std::span<const Image> dataset, const TrainingConfig& config,
              int image_size = 32, const EpochCallback& on_epoch = {});

// epoch,step,l_prior,l_like,l_gan
void write_loss_history(const std::vector<LossBreakdown>& history,
                        const std::filesystem::path& path);

}  // namespace lglab::vaegan

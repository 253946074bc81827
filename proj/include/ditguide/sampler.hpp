#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "ditguide/common.hpp"
#include "ditguide/model.hpp"
#include "ditguide/rng.hpp"

// Rectified-flow Euler sampling. Timesteps are integers t in [1, T]
// with tau = t / T, so t = T is pure noise and the step to t - 1
// subtracts velocity / T. The attention bundle of a step always comes
// from the conditional forward pass.

namespace ditguide {

template <typename T>
std::vector<T> sample_initial_noise(int latent_size, uint64_t seed) {
    Rng rng(derive_seed(seed, 0x201e));
    std::vector<T> z(static_cast<size_t>(latent_size));
    for (auto& x : z) x = static_cast<T>(rng.normal());
    return z;
}

template <typename T>
struct DenoiseStepResult {
    Tensor<T> next_latent;
    AttentionBundle<T> bundle;  // from the conditional pass
    bool has_bundle = false;
};

// One classifier-free-guided Euler update:
//   v = v_uncond + scale * (v_cond - v_uncond),   z' = z - v / T.
// scale == 0 degenerates to the unconditional velocity; scale == 1
// uses the conditional velocity directly and skips the extra pass.
template <typename T>
DenoiseStepResult<T> denoise_step(const ToyMMDiT<T>& model, const Tensor<T>& latent, int t,
                                  int total_steps, const TokenizedPrompt& prompt, double guidance_scale,
                                  bool capture_attention = true) {
    if (t < 1 || t > total_steps) {
        throw Error("denoise_step: t=" + std::to_string(t) + " outside [1," +
                    std::to_string(total_steps) + "]");
    }
    if (!all_finite(latent.values())) {
        throw NumericError("denoise_step: non-finite latent at t=" + std::to_string(t));
    }
    const double tau = static_cast<double>(t) / total_steps;

    DenoiseStepResult<T> out;
    ForwardResult<T> cond = model.forward(latent, tau, &prompt, capture_attention);
    out.bundle = std::move(cond.bundle);
    out.has_bundle = cond.has_bundle;

    Tensor<T> velocity;
    if (guidance_scale == 1.0) {
        velocity = cond.velocity;
    } else {
        ForwardResult<T> uncond = model.forward(latent, tau, nullptr, false);
        velocity = add(uncond.velocity,
                       scale(sub(cond.velocity, uncond.velocity), static_cast<T>(guidance_scale)));
    }
    out.next_latent = sub(latent, scale(velocity, static_cast<T>(1.0 / total_steps)));
    return out;
}

// Conditional forward only; used by the guidance iterations, which
// need the attention graph but not an Euler update.
template <typename T>
ForwardResult<T> forward_attention(const ToyMMDiT<T>& model, const Tensor<T>& latent, int t,
                                   int total_steps, const TokenizedPrompt& prompt) {
    if (t < 1 || t > total_steps) {
        throw Error("forward_attention: t=" + std::to_string(t) + " outside [1," +
                    std::to_string(total_steps) + "]");
    }
    if (!all_finite(latent.values())) {
        throw NumericError("forward_attention: non-finite latent at t=" + std::to_string(t));
    }
    return model.forward(latent, static_cast<double>(t) / total_steps, &prompt, true);
}

// Identity autoencoder: encode is the identity, decode clamps to [0,1].
template <typename T>
std::vector<T> encode(const ToyImage& image) {
    std::vector<T> z(image.pixels.size());
    for (size_t i = 0; i < z.size(); ++i) z[i] = static_cast<T>(image.pixels[i]);
    return z;
}

template <typename T>
ToyImage decode(const std::vector<T>& latent, int side, int channels) {
    if (latent.size() != static_cast<size_t>(side) * side * channels) {
        throw Error("decode: latent size mismatch");
    }
    ToyImage img;
    img.height = side;
    img.width = side;
    img.channels = channels;
    img.pixels.resize(latent.size());
    for (size_t i = 0; i < latent.size(); ++i) {
        img.pixels[i] = std::clamp(static_cast<float>(latent[i]), 0.0f, 1.0f);
    }
    return img;
}

// Plain T-step sampling with no optimization and no detection. The
// guided controller's baseline mode must match this bit for bit.
template <typename T>
ToyImage plain_sample(const ToyMMDiT<T>& model, const TokenizedPrompt& prompt, uint64_t seed,
                      int total_steps, double guidance_scale) {
    const ModelConfig& cfg = model.config();
    std::vector<T> z = sample_initial_noise<T>(cfg.latent_size(), seed);
    for (int t = total_steps; t >= 1; --t) {
        Tensor<T> zt = Tensor<T>::leaf(std::move(z), {cfg.image_side, cfg.image_side, cfg.channels});
        DenoiseStepResult<T> step = denoise_step(model, zt, t, total_steps, prompt, guidance_scale,
                                                 /*capture_attention=*/false);
        z = step.next_latent.values();
    }
    return decode(z, cfg.image_side, cfg.channels);
}

}  // namespace ditguide

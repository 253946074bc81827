#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "ditguide/attention.hpp"
#include "ditguide/common.hpp"
#include "ditguide/dataset.hpp"
#include "ditguide/rng.hpp"
#include "ditguide/tensor.hpp"
#include "ditguide/tokenizer.hpp"

// A small MMDiT-style denoiser: image tokens and two concatenated text
// token streams run through joint self-attention blocks with
// modality-specific projections. Trained with a rectified-flow
// velocity objective; the forward pass can capture the cross portions
// of every block's attention.

namespace ditguide {

struct ModelConfig {
    int num_blocks = 12;
    int heads = 4;
    int width = 64;
    int image_side = 32;
    int channels = 3;
    int patch_size = 4;
    int mlp_ratio = 4;
    int time_features = 16;
    int max_tokens_a = 16;
    int max_tokens_b = 64;
    int vocab_a = 0;  // filled from the tokenizer tables
    int vocab_b = 0;

    // training hyperparameters
    double learning_rate = 2e-3;
    int lr_warmup_steps = 200;
    double lr_final_fraction = 0.05;  // cosine decay floor
    int train_steps = 12000;
    int batch_size = 4;
    double uncond_drop_prob = 0.1;

    int grid_side() const { return image_side / patch_size; }
    int image_tokens() const { return grid_side() * grid_side(); }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int latent_size() const { return image_side * image_side * channels; }

    void validate() const {
        if (image_side % patch_size != 0) throw Error("model: image_side not divisible by patch_size");
        if (width % heads != 0) throw Error("model: width not divisible by heads");
        if (num_blocks < 1) throw Error("model: need at least one block");
        if (time_features % 2 != 0) throw Error("model: time_features must be even");
    }
};

// Per-modality weights of one joint-attention block. Time enters
// through adaLN-zero modulation: six vectors (shift/scale/gate for the
// attention and MLP branches) predicted from the time embedding, with
// zero-initialized gates so every block starts as the identity.
template <typename T>
struct StreamParams {
    Tensor<T> mod_w, mod_b;  // [width, 6*width], [6*width]
    Tensor<T> qkv_w, qkv_b;  // [width, 3*width]
    Tensor<T> out_w, out_b;  // [width, width]
    Tensor<T> mlp_w1, mlp_b1;  // [width, mlp_ratio*width]
    Tensor<T> mlp_w2, mlp_b2;  // [mlp_ratio*width, width]
};

template <typename T>
struct BlockParams {
    StreamParams<T> img;
    StreamParams<T> txt;
};

template <typename T>
struct ForwardResult {
    Tensor<T> velocity;  // [image_side, image_side, channels]
    AttentionBundle<T> bundle;
    bool has_bundle = false;
};

template <typename T>
class ToyMMDiT {
public:
    ToyMMDiT() = default;

    ToyMMDiT(ModelConfig cfg, TokenizerTables tables) : cfg_(std::move(cfg)), tables_(std::move(tables)) {
        cfg_.validate();
        cfg_.vocab_a = tables_.vocab_size_a();
        cfg_.vocab_b = tables_.vocab_size_b();
        allocate();
        build_patch_maps();
    }

    const ModelConfig& config() const { return cfg_; }
    const TokenizerTables& tables() const { return tables_; }

    // Deterministic weight init.
    void init_weights(uint64_t seed) {
        Rng rng(derive_seed(seed, 0x1417));
        auto fill_normal = [&](Tensor<T>& t, double std) {
            for (auto& x : t.mutable_values()) x = static_cast<T>(rng.normal() * std);
        };
        auto fill_const = [&](Tensor<T>& t, double v) {
            for (auto& x : t.mutable_values()) x = static_cast<T>(v);
        };
        const double ws = 0.02;
        fill_normal(patch_w_, ws);
        fill_const(patch_b_, 0);
        fill_normal(pos_img_, ws);
        fill_normal(emb_a_, ws);
        fill_normal(emb_b_, ws);
        fill_normal(pos_a_, ws);
        fill_normal(pos_b_, ws);
        fill_normal(time_w1_, ws);
        fill_const(time_b1_, 0);
        fill_normal(time_w2_, ws);
        fill_const(time_b2_, 0);
        for (auto& blk : blocks_) {
            for (StreamParams<T>* s : {&blk.img, &blk.txt}) {
                fill_const(s->mod_w, 0);  // adaLN-zero: identity blocks at init
                fill_const(s->mod_b, 0);
                fill_normal(s->qkv_w, ws);
                fill_const(s->qkv_b, 0);
                fill_normal(s->out_w, ws);
                fill_const(s->out_b, 0);
                fill_normal(s->mlp_w1, ws);
                fill_const(s->mlp_b1, 0);
                fill_normal(s->mlp_w2, ws);
                fill_const(s->mlp_b2, 0);
            }
        }
        fill_const(final_mod_w_, 0);
        fill_const(final_mod_b_, 0);
        fill_const(head_w_, 0);  // zero velocity at init
        fill_const(head_b_, 0);
    }

    // Whether parameters participate in gradient computation. Off for
    // inference so guidance backward passes only track the latent.
    void set_trainable(bool on) {
        for (auto& [name, t] : named_params()) {
            (void)name;
            t->node()->requires_grad = on;
        }
    }

    std::vector<std::pair<std::string, Tensor<T>*>> named_params() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        out.emplace_back("patch_embed.weight", &patch_w_);
        out.emplace_back("patch_embed.bias", &patch_b_);
        out.emplace_back("pos_embed.image", &pos_img_);
        out.emplace_back("token_embed.a", &emb_a_);
        out.emplace_back("token_embed.b", &emb_b_);
        out.emplace_back("pos_embed.text_a", &pos_a_);
        out.emplace_back("pos_embed.text_b", &pos_b_);
        out.emplace_back("time_mlp.w1", &time_w1_);
        out.emplace_back("time_mlp.b1", &time_b1_);
        out.emplace_back("time_mlp.w2", &time_w2_);
        out.emplace_back("time_mlp.b2", &time_b2_);
        for (size_t b = 0; b < blocks_.size(); ++b) {
            const std::string p = "blocks." + std::to_string(b) + ".";
            auto stream = [&](const std::string& tag, StreamParams<T>& s) {
                out.emplace_back(p + tag + ".mod.weight", &s.mod_w);
                out.emplace_back(p + tag + ".mod.bias", &s.mod_b);
                out.emplace_back(p + tag + ".qkv.weight", &s.qkv_w);
                out.emplace_back(p + tag + ".qkv.bias", &s.qkv_b);
                out.emplace_back(p + tag + ".out.weight", &s.out_w);
                out.emplace_back(p + tag + ".out.bias", &s.out_b);
                out.emplace_back(p + tag + ".mlp.w1", &s.mlp_w1);
                out.emplace_back(p + tag + ".mlp.b1", &s.mlp_b1);
                out.emplace_back(p + tag + ".mlp.w2", &s.mlp_w2);
                out.emplace_back(p + tag + ".mlp.b2", &s.mlp_b2);
            };
            stream("img", blocks_[b].img);
            stream("txt", blocks_[b].txt);
        }
        out.emplace_back("final.mod.weight", &final_mod_w_);
        out.emplace_back("final.mod.bias", &final_mod_b_);
        out.emplace_back("head.weight", &head_w_);
        out.emplace_back("head.bias", &head_b_);
        return out;
    }

    int64_t parameter_count() {
        int64_t n = 0;
        for (auto& [name, t] : named_params()) {
            (void)name;
            n += t->numel();
        }
        return n;
    }

    // One denoiser evaluation. latent: [image_side, image_side, channels],
    // tau in [0,1] (1 = pure noise). prompt == nullptr means the
    // unconditional branch. Attention is captured only when requested
    // and a prompt is present.
    ForwardResult<T> forward(const Tensor<T>& latent, double tau, const TokenizedPrompt* prompt,
                             bool capture_attention = false) const {
        if (latent.numel() != cfg_.latent_size()) {
            throw Error("forward: latent size mismatch");
        }
        const int n_img = cfg_.image_tokens();
        const int w = cfg_.width;

        // image tokens
        Tensor<T> patches = gather(latent, patchify_idx_, {n_img, cfg_.patch_dim()});
        Tensor<T> x_img = add(affine(patches, patch_w_, patch_b_), pos_img_);

        // time embedding feeding the per-block adaLN modulation
        Tensor<T> tf = time_features(tau);
        Tensor<T> temb = gelu(affine(gelu(affine(tf, time_w1_, time_b1_)), time_w2_, time_b2_));

        // text tokens: encoder A then encoder B along the sequence
        int la = 0, lb = 0;
        Tensor<T> x_txt;
        if (prompt != nullptr) {
            la = static_cast<int>(prompt->tokens_a.size());
            lb = static_cast<int>(prompt->tokens_b.size());
            if (la > cfg_.max_tokens_a || lb > cfg_.max_tokens_b) {
                throw Error("forward: prompt exceeds configured token capacity");
            }
            Tensor<T> xa = add(embedding_rows(emb_a_, prompt->tokens_a), slice2d(pos_a_, 0, la, 0, w));
            Tensor<T> xb = add(embedding_rows(emb_b_, prompt->tokens_b), slice2d(pos_b_, 0, lb, 0, w));
            x_txt = concat_rows<T>({xa, xb});
        }
        const int n_txt = la + lb;

        ForwardResult<T> result;
        const bool capture = capture_attention && n_txt > 0;
        if (capture) {
            result.bundle.grid_h = cfg_.grid_side();
            result.bundle.grid_w = cfg_.grid_side();
            result.bundle.tokens_a = la;
            result.bundle.tokens_b = lb;
            result.bundle.img_to_txt.resize(static_cast<size_t>(cfg_.num_blocks));
            result.bundle.txt_to_img.resize(static_cast<size_t>(cfg_.num_blocks));
        }

        // per-stream modulation vectors: shift/scale/gate for the
        // attention branch and the MLP branch
        struct Mod {
            Tensor<T> shift1, scale1, gate1, shift2, scale2, gate2;
        };
        auto modulation = [&](const StreamParams<T>& s) {
            Tensor<T> m = affine(temb, s.mod_w, s.mod_b);  // [1, 6w]
            auto piece = [&](int k) { return reshape(slice2d(m, 0, 1, k * w, (k + 1) * w), {w}); };
            return Mod{piece(0), piece(1), piece(2), piece(3), piece(4), piece(5)};
        };
        auto modulate = [&](const Tensor<T>& x, const Tensor<T>& shift, const Tensor<T>& sc) {
            return add_rowvec(mul_rowvec(x, add_const(sc, T(1))), shift);
        };

        for (int b = 0; b < cfg_.num_blocks; ++b) {
            const BlockParams<T>& blk = blocks_[static_cast<size_t>(b)];
            const Mod mi = modulation(blk.img);
            Mod mt;
            if (n_txt > 0) mt = modulation(blk.txt);

            // joint self-attention with modality-specific projections
            Tensor<T> qkv_img = affine(modulate(layernorm_plain(x_img), mi.shift1, mi.scale1),
                                       blk.img.qkv_w, blk.img.qkv_b);
            Tensor<T> qkv;
            if (n_txt > 0) {
                Tensor<T> qkv_txt = affine(modulate(layernorm_plain(x_txt), mt.shift1, mt.scale1),
                                           blk.txt.qkv_w, blk.txt.qkv_b);
                qkv = concat_rows<T>({qkv_img, qkv_txt});
            } else {
                qkv = qkv_img;
            }
            const int seq = n_img + n_txt;
            const int dh = w / cfg_.heads;
            const T inv_sqrt_dh = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
            std::vector<Tensor<T>> head_outs;
            head_outs.reserve(static_cast<size_t>(cfg_.heads));
            for (int h = 0; h < cfg_.heads; ++h) {
                Tensor<T> q = slice2d(qkv, 0, seq, h * dh, (h + 1) * dh);
                Tensor<T> k = slice2d(qkv, 0, seq, w + h * dh, w + (h + 1) * dh);
                Tensor<T> v = slice2d(qkv, 0, seq, 2 * w + h * dh, 2 * w + (h + 1) * dh);
                Tensor<T> attn = softmax_rows(scale(matmul(q, k, false, true), inv_sqrt_dh));
                if (capture) {
                    result.bundle.img_to_txt[(size_t)b].push_back(slice2d(attn, 0, n_img, n_img, seq));
                    result.bundle.txt_to_img[(size_t)b].push_back(slice2d(attn, n_img, seq, 0, n_img));
                }
                head_outs.push_back(matmul(attn, v));
            }
            Tensor<T> attn_out = concat_cols(head_outs);  // [seq, w]

            Tensor<T> o_img = affine(slice2d(attn_out, 0, n_img, 0, w), blk.img.out_w, blk.img.out_b);
            x_img = add(x_img, mul_rowvec(o_img, mi.gate1));
            Tensor<T> m_img = affine(
                gelu(affine(modulate(layernorm_plain(x_img), mi.shift2, mi.scale2), blk.img.mlp_w1,
                            blk.img.mlp_b1)),
                blk.img.mlp_w2, blk.img.mlp_b2);
            x_img = add(x_img, mul_rowvec(m_img, mi.gate2));

            if (n_txt > 0) {
                Tensor<T> o_txt = affine(slice2d(attn_out, n_img, seq, 0, w), blk.txt.out_w, blk.txt.out_b);
                x_txt = add(x_txt, mul_rowvec(o_txt, mt.gate1));
                Tensor<T> m_txt = affine(
                    gelu(affine(modulate(layernorm_plain(x_txt), mt.shift2, mt.scale2), blk.txt.mlp_w1,
                                blk.txt.mlp_b1)),
                    blk.txt.mlp_w2, blk.txt.mlp_b2);
                x_txt = add(x_txt, mul_rowvec(m_txt, mt.gate2));
            }
        }

        // modulated final norm, then the zero-initialized velocity head
        Tensor<T> fmod = affine(temb, final_mod_w_, final_mod_b_);  // [1, 2w]
        Tensor<T> fshift = reshape(slice2d(fmod, 0, 1, 0, w), {w});
        Tensor<T> fscale = reshape(slice2d(fmod, 0, 1, w, 2 * w), {w});
        Tensor<T> tokens = affine(modulate(layernorm_plain(x_img), fshift, fscale), head_w_, head_b_);
        result.velocity = gather(reshape(tokens, {n_img * cfg_.patch_dim()}), unpatchify_idx_,
                                 {cfg_.image_side, cfg_.image_side, cfg_.channels});
        result.has_bundle = capture;
        return result;
    }

private:
    void allocate() {
        const int w = cfg_.width;
        const int pd = cfg_.patch_dim();
        patch_w_ = Tensor<T>::zeros({pd, w}, true);
        patch_b_ = Tensor<T>::zeros({w}, true);
        pos_img_ = Tensor<T>::zeros({cfg_.image_tokens(), w}, true);
        emb_a_ = Tensor<T>::zeros({cfg_.vocab_a, w}, true);
        emb_b_ = Tensor<T>::zeros({cfg_.vocab_b, w}, true);
        pos_a_ = Tensor<T>::zeros({cfg_.max_tokens_a, w}, true);
        pos_b_ = Tensor<T>::zeros({cfg_.max_tokens_b, w}, true);
        time_w1_ = Tensor<T>::zeros({cfg_.time_features, w}, true);
        time_b1_ = Tensor<T>::zeros({w}, true);
        time_w2_ = Tensor<T>::zeros({w, w}, true);
        time_b2_ = Tensor<T>::zeros({w}, true);
        blocks_.resize(static_cast<size_t>(cfg_.num_blocks));
        for (auto& blk : blocks_) {
            for (StreamParams<T>* s : {&blk.img, &blk.txt}) {
                s->mod_w = Tensor<T>::zeros({w, 6 * w}, true);
                s->mod_b = Tensor<T>::zeros({6 * w}, true);
                s->qkv_w = Tensor<T>::zeros({w, 3 * w}, true);
                s->qkv_b = Tensor<T>::zeros({3 * w}, true);
                s->out_w = Tensor<T>::zeros({w, w}, true);
                s->out_b = Tensor<T>::zeros({w}, true);
                s->mlp_w1 = Tensor<T>::zeros({w, cfg_.mlp_ratio * w}, true);
                s->mlp_b1 = Tensor<T>::zeros({cfg_.mlp_ratio * w}, true);
                s->mlp_w2 = Tensor<T>::zeros({cfg_.mlp_ratio * w, w}, true);
                s->mlp_b2 = Tensor<T>::zeros({w}, true);
            }
        }
        final_mod_w_ = Tensor<T>::zeros({w, 2 * w}, true);
        final_mod_b_ = Tensor<T>::zeros({2 * w}, true);
        head_w_ = Tensor<T>::zeros({w, pd}, true);
        head_b_ = Tensor<T>::zeros({pd}, true);
    }

    void build_patch_maps() {
        const int side = cfg_.image_side, P = cfg_.patch_size, C = cfg_.channels;
        const int g = cfg_.grid_side();
        patchify_idx_.resize(static_cast<size_t>(cfg_.image_tokens()) * cfg_.patch_dim());
        unpatchify_idx_.resize(static_cast<size_t>(cfg_.latent_size()));
        int64_t k = 0;
        for (int gy = 0; gy < g; ++gy) {
            for (int gx = 0; gx < g; ++gx) {
                for (int py = 0; py < P; ++py) {
                    for (int px = 0; px < P; ++px) {
                        for (int c = 0; c < C; ++c) {
                            const int64_t flat =
                                (static_cast<int64_t>(gy * P + py) * side + (gx * P + px)) * C + c;
                            patchify_idx_[(size_t)k] = flat;
                            unpatchify_idx_[(size_t)flat] = k;
                            ++k;
                        }
                    }
                }
            }
        }
    }

    Tensor<T> time_features(double tau) const {
        std::vector<T> f(static_cast<size_t>(cfg_.time_features));
        for (int k = 0; k < cfg_.time_features / 2; ++k) {
            const double omega = std::pow(2.0, k);
            f[(size_t)(2 * k)] = static_cast<T>(std::sin(tau * omega));
            f[(size_t)(2 * k + 1)] = static_cast<T>(std::cos(tau * omega));
        }
        return Tensor<T>::leaf(std::move(f), {1, cfg_.time_features}, false);
    }

    ModelConfig cfg_;
    TokenizerTables tables_;
    std::vector<int64_t> patchify_idx_;
    std::vector<int64_t> unpatchify_idx_;

    Tensor<T> patch_w_, patch_b_, pos_img_;
    Tensor<T> emb_a_, emb_b_, pos_a_, pos_b_;
    Tensor<T> time_w1_, time_b1_, time_w2_, time_b2_;
    std::vector<BlockParams<T>> blocks_;
    Tensor<T> final_mod_w_, final_mod_b_, head_w_, head_b_;
};

// -------------------------------------------------------------- training

template <typename T>
class Adam {
public:
    Adam(std::vector<std::pair<std::string, Tensor<T>*>> params, double lr, double beta1 = 0.9,
         double beta2 = 0.999, double eps = 1e-8)
        : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& [name, t] : params_) {
            (void)name;
            m_.emplace_back(t->numel(), 0.0);
            v_.emplace_back(t->numel(), 0.0);
        }
    }

    void zero_grad() {
        for (auto& [name, t] : params_) {
            (void)name;
            t->zero_grad();
        }
    }

    void set_lr(double lr) { lr_ = lr; }

    void step() {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, t_);
        const double bc2 = 1.0 - std::pow(beta2_, t_);
        for (size_t p = 0; p < params_.size(); ++p) {
            Tensor<T>* param = params_[p].second;
            auto& vals = param->mutable_values();
            const auto& g = param->grad();
            if (g.size() != vals.size()) continue;  // never touched by a backward pass
            for (size_t i = 0; i < vals.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                m_[p][i] = beta1_ * m_[p][i] + (1.0 - beta1_) * gi;
                v_[p][i] = beta2_ * v_[p][i] + (1.0 - beta2_) * gi * gi;
                const double mhat = m_[p][i] / bc1;
                const double vhat = v_[p][i] / bc2;
                vals[i] -= static_cast<T>(lr_ * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    std::vector<std::pair<std::string, Tensor<T>*>> params_;
    double lr_, beta1_, beta2_, eps_;
    int t_ = 0;
    std::vector<std::vector<double>> m_;
    std::vector<std::vector<double>> v_;
};

// Rectified-flow interpolant z_tau = (1 - tau) * x + tau * eps with
// velocity target eps - x.
template <typename T>
struct FlowSample {
    std::vector<T> z;
    std::vector<T> target;
    const TokenizedPrompt* prompt;  // nullptr when the condition is dropped
};

template <typename T>
FlowSample<T> make_flow_sample(const ToySample& data, double tau, Rng& rng, bool drop_condition) {
    FlowSample<T> s;
    const size_t n = data.image.pixels.size();
    s.z.resize(n);
    s.target.resize(n);
    for (size_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(data.image.pixels[i]);
        const double e = rng.normal();
        s.z[i] = static_cast<T>((1.0 - tau) * x + tau * e);
        s.target[i] = static_cast<T>(e - x);
    }
    s.prompt = drop_condition ? nullptr : &data.prompt;
    return s;
}

struct TrainHooks {
    // Called every `log_every` steps with (step, running mean loss).
    std::function<void(int, double)> on_progress;
    int log_every = 500;
};

// Mean velocity MSE on a held-out stream of procedurally generated
// samples. Pure; usable on any model state.
template <typename T>
double heldout_flow_loss(const ToyMMDiT<T>& model, const DatasetConfig& data_cfg, uint64_t seed,
                         int n_samples) {
    double total = 0.0;
    for (int i = 0; i < n_samples; ++i) {
        const ToySample sample = generate_toy_sample(derive_seed(seed, 0xe5a1, (uint64_t)i), data_cfg,
                                                     model.tables());
        Rng rng(derive_seed(seed, 0xe5a2, (uint64_t)i));
        const double tau = rng.uniform();
        FlowSample<T> fs = make_flow_sample<T>(sample, tau, rng, false);
        Tensor<T> z = Tensor<T>::leaf(fs.z, {model.config().image_side, model.config().image_side,
                                             model.config().channels});
        ForwardResult<T> out = model.forward(z, tau, fs.prompt, false);
        double mse = 0.0;
        const auto& v = out.velocity.values();
        for (size_t j = 0; j < v.size(); ++j) {
            const double d = static_cast<double>(v[j]) - static_cast<double>(fs.target[j]);
            mse += d * d;
        }
        total += mse / static_cast<double>(v.size());
    }
    return total / n_samples;
}

// Trains in place. Deterministic in (configs, seed). Throws
// NumericError when the loss goes non-finite, naming the step.
template <typename T>
void train_toy_model(ToyMMDiT<T>& model, const DatasetConfig& data_cfg, uint64_t seed,
                     const TrainHooks* hooks = nullptr) {
    const ModelConfig& cfg = model.config();
    model.set_trainable(true);
    Adam<T> opt(model.named_params(), cfg.learning_rate);
    double running = 0.0;
    int running_n = 0;
    // linear warmup, then cosine decay to lr_final_fraction
    auto lr_at = [&](int step) {
        if (cfg.lr_warmup_steps > 0 && step <= cfg.lr_warmup_steps) {
            return cfg.learning_rate * step / cfg.lr_warmup_steps;
        }
        const double span = std::max(1, cfg.train_steps - cfg.lr_warmup_steps);
        const double progress = (step - cfg.lr_warmup_steps) / span;
        const double cos_part = 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
        return cfg.learning_rate * (cfg.lr_final_fraction + (1.0 - cfg.lr_final_fraction) * cos_part);
    };
    for (int step = 1; step <= cfg.train_steps; ++step) {
        opt.set_lr(lr_at(step));
        opt.zero_grad();
        double batch_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const uint64_t k = static_cast<uint64_t>(step - 1) * cfg.batch_size + b;
            const ToySample sample = generate_toy_sample(derive_seed(seed, 0xda7a0, k), data_cfg,
                                                         model.tables());
            Rng rng(derive_seed(seed, 0xf10a, k));
            const double tau = rng.uniform();
            const bool drop = rng.uniform() < cfg.uncond_drop_prob;
            FlowSample<T> fs = make_flow_sample<T>(sample, tau, rng, drop);
            Tensor<T> z = Tensor<T>::leaf(fs.z, {cfg.image_side, cfg.image_side, cfg.channels});
            ForwardResult<T> out = model.forward(z, tau, fs.prompt, false);
            Tensor<T> target = Tensor<T>::leaf(fs.target, out.velocity.shape());
            Tensor<T> diff = sub(out.velocity, target);
            Tensor<T> loss = scale(mean_all(mul(diff, diff)), T(1.0 / cfg.batch_size));
            loss.backward();
            batch_loss += static_cast<double>(loss.item());
        }
        if (!std::isfinite(batch_loss)) {
            throw NumericError("training diverged at step " + std::to_string(step));
        }
        opt.step();
        running += batch_loss;
        ++running_n;
        if (hooks != nullptr && hooks->on_progress && step % hooks->log_every == 0) {
            hooks->on_progress(step, running / running_n);
            running = 0.0;
            running_n = 0;
        }
    }
    model.set_trainable(false);
}

}  // namespace ditguide

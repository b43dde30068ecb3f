#include "fewtune/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fewtune/classifier.hpp"
#include "fewtune/errors.hpp"
#include "fewtune/rng.hpp"

namespace fewtune {

std::size_t MlpParams::input_dim() const {
    return layers.empty() ? 0 : layers.front().weight.cols();
}

std::size_t MlpParams::embed_dim() const {
    return layers.empty() ? 0 : layers.back().weight.rows();
}

std::size_t MlpParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += l.weight.size() + l.bias.size();
    return n;
}

void MlpParams::validate() const {
    if (layers.empty()) throw shape_error("mlp: no layers");
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const auto& l = layers[i];
        if (l.bias.size() != l.weight.rows())
            throw shape_error("mlp: layer " + std::to_string(i) + " bias/weight mismatch");
        if (i > 0 && l.weight.cols() != layers[i - 1].weight.rows())
            throw shape_error("mlp: layer " + std::to_string(i) + " fan_in does not chain");
    }
}

MlpParams make_mlp(std::size_t input_dim, const std::vector<std::size_t>& hidden,
                   std::size_t embed_dim, std::uint64_t seed) {
    std::vector<std::size_t> widths;
    widths.push_back(input_dim);
    for (std::size_t h : hidden) widths.push_back(h);
    widths.push_back(embed_dim);

    MlpParams p;
    for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
        std::size_t fan_in = widths[l], fan_out = widths[l + 1];
        Rng rng(derive_seed(seed, "layer", l));
        double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
        MlpLayer layer{Matrix(fan_out, fan_in), Vec(fan_out, 0.0)};
        for (std::size_t r = 0; r < fan_out; ++r)
            for (std::size_t c = 0; c < fan_in; ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
        p.layers.push_back(std::move(layer));
    }
    p.validate();
    return p;
}

MlpParams make_identity(std::size_t dim) {
    MlpParams p;
    p.layers.push_back({Matrix::identity(dim), Vec(dim, 0.0)});
    return p;
}

namespace {

std::uint64_t params_digest(const MlpParams& p) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix_bytes = [&h](const void* data, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& l : p.layers) {
        std::size_t dims[2] = {l.weight.rows(), l.weight.cols()};
        mix_bytes(dims, sizeof dims);
        mix_bytes(l.weight.data(), l.weight.size() * sizeof(double));
        mix_bytes(l.bias.data(), l.bias.size() * sizeof(double));
    }
    return h;
}

// out = in * W^T + b, one row per example.
Matrix affine_forward(const Matrix& in, const MlpLayer& layer) {
    Matrix out(in.rows(), layer.weight.rows());
    for (std::size_t n = 0; n < in.rows(); ++n)
        for (std::size_t j = 0; j < layer.weight.rows(); ++j) {
            double acc = layer.bias[j];
            for (std::size_t k = 0; k < layer.weight.cols(); ++k)
                acc += layer.weight(j, k) * in(n, k);
            out(n, j) = acc;
        }
    return out;
}

Matrix relu(const Matrix& m) {
    Matrix out = m;
    for (std::size_t i = 0; i < out.rows(); ++i)
        for (std::size_t j = 0; j < out.cols(); ++j)
            if (out(i, j) < 0.0) out(i, j) = 0.0;
    return out;
}

} // namespace

Matrix forward(const MlpParams& params, const Matrix& inputs, ForwardCache* cache) {
    params.validate();
    if (inputs.cols() != params.input_dim())
        throw shape_error("forward: input dimension " + std::to_string(inputs.cols()) +
                          " does not match first layer fan_in " +
                          std::to_string(params.input_dim()));
    if (cache) {
        cache->input = inputs;
        cache->pre_act.clear();
        cache->params_digest = params_digest(params);
    }
    Matrix act = inputs;
    for (std::size_t l = 0; l < params.layers.size(); ++l) {
        Matrix pre = affine_forward(act, params.layers[l]);
        if (cache) cache->pre_act.push_back(pre);
        bool last = (l + 1 == params.layers.size());
        act = last ? std::move(pre) : relu(pre);
    }
    return act;
}

Gradients zero_like(const MlpParams& params) {
    Gradients g;
    for (const auto& l : params.layers)
        g.layers.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vec(l.bias.size(), 0.0)});
    return g;
}

bool Gradients::all_finite_values() const {
    for (const auto& l : layers)
        if (!all_finite(l.weight) || !all_finite(std::span<const double>(l.bias))) return false;
    return true;
}

Gradients backward(const MlpParams& params, const ForwardCache& cache, const Matrix& upstream,
                   Matrix* input_grad) {
    if (cache.pre_act.size() != params.layers.size() ||
        cache.params_digest != params_digest(params))
        throw contract_error("backward: cache does not match these parameters");
    if (upstream.rows() != cache.input.rows() || upstream.cols() != params.embed_dim())
        throw shape_error("backward: upstream shape mismatch");

    Gradients grads = zero_like(params);
    Matrix g = upstream; // gradient w.r.t. current layer's pre-activation
    for (std::size_t li = params.layers.size(); li-- > 0;) {
        const MlpLayer& layer = params.layers[li];
        // ReLU applies to this layer's output only when it is not the last.
        if (li + 1 < params.layers.size()) {
            const Matrix& pre = cache.pre_act[li];
            for (std::size_t n = 0; n < g.rows(); ++n)
                for (std::size_t j = 0; j < g.cols(); ++j)
                    if (pre(n, j) <= 0.0) g(n, j) = 0.0; // ReLU'(0) = 0
        }
        // Layer input: previous layer's post-activation, or the raw batch.
        Matrix layer_in;
        if (li == 0) {
            layer_in = cache.input;
        } else {
            layer_in = relu(cache.pre_act[li - 1]);
        }
        MlpLayer& lg = grads.layers[li];
        for (std::size_t n = 0; n < g.rows(); ++n)
            for (std::size_t j = 0; j < g.cols(); ++j) {
                double gj = g(n, j);
                if (gj == 0.0) continue;
                lg.bias[j] += gj;
                for (std::size_t k = 0; k < layer_in.cols(); ++k)
                    lg.weight(j, k) += gj * layer_in(n, k);
            }
        if (li == 0 && !input_grad) break;
        Matrix gnext(g.rows(), layer.weight.cols(), 0.0);
        for (std::size_t n = 0; n < g.rows(); ++n)
            for (std::size_t j = 0; j < g.cols(); ++j) {
                double gj = g(n, j);
                if (gj == 0.0) continue;
                for (std::size_t k = 0; k < layer.weight.cols(); ++k)
                    gnext(n, k) += gj * layer.weight(j, k);
            }
        g = std::move(gnext);
        if (li == 0 && input_grad) *input_grad = g;
    }
    return grads;
}

namespace {

struct Momentum {
    std::vector<MlpLayer> vel;

    explicit Momentum(const MlpParams& p) {
        for (const auto& l : p.layers)
            vel.push_back({Matrix(l.weight.rows(), l.weight.cols()), Vec(l.bias.size(), 0.0)});
    }
    void apply(std::vector<MlpLayer>& layers, const std::vector<MlpLayer>& grads, double lr,
               double momentum) {
        for (std::size_t li = 0; li < layers.size(); ++li) {
            auto& v = vel[li];
            auto& l = layers[li];
            const auto& g = grads[li];
            for (std::size_t i = 0; i < v.weight.size(); ++i) {
                v.weight.data()[i] = momentum * v.weight.data()[i] + g.weight.data()[i];
                l.weight.data()[i] -= lr * v.weight.data()[i];
            }
            for (std::size_t i = 0; i < v.bias.size(); ++i) {
                v.bias[i] = momentum * v.bias[i] + g.bias[i];
                l.bias[i] -= lr * v.bias[i];
            }
        }
    }
};

} // namespace

PretrainResult pretrain_with_head(const MlpParams& init, const Dataset& base,
                                  const PretrainConfig& cfg) {
    init.validate();
    if (base.examples.empty()) throw data_error("pretrain: base dataset is empty");
    if (base.dim != init.input_dim())
        throw shape_error("pretrain: dataset dim does not match backbone input");
    if (cfg.lr < 0.0) throw config_error("pretrain: lr must be >= 0");
    if (cfg.epochs < 1) throw config_error("pretrain: epochs must be >= 1");
    if (cfg.batch_size < 1) throw config_error("pretrain: batch_size must be >= 1");

    MlpParams params = init;
    std::size_t d = params.embed_dim();
    std::size_t num_classes = base.num_classes;

    // Throwaway linear classification head over the base classes.
    MlpLayer head{Matrix(num_classes, d), Vec(num_classes, 0.0)};
    {
        Rng rng(derive_seed(cfg.seed, "head"));
        double limit = std::sqrt(6.0 / static_cast<double>(d));
        for (std::size_t r = 0; r < num_classes; ++r)
            for (std::size_t c = 0; c < d; ++c) head.weight(r, c) = rng.uniform(-limit, limit);
    }

    Momentum body_m(params);
    MlpParams head_as_params;
    head_as_params.layers.push_back(head);
    Momentum head_m(head_as_params);

    std::vector<std::size_t> order(base.examples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    std::vector<double> epoch_losses;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        Rng rng(derive_seed(cfg.seed, "shuffle", static_cast<std::uint64_t>(epoch)));
        for (std::size_t i = 0; i + 1 < order.size(); ++i) {
            std::size_t j = i + rng.uniform_index(order.size() - i);
            std::swap(order[i], order[j]);
        }
        double loss_sum = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t n = std::min(cfg.batch_size, order.size() - start);
            Matrix x(n, base.dim);
            std::vector<int> y(n);
            for (std::size_t i = 0; i < n; ++i) {
                const auto& ex = base.examples[order[start + i]];
                for (std::size_t k = 0; k < base.dim; ++k) x(i, k) = ex.input[k];
                y[i] = ex.label;
            }
            ForwardCache cache;
            Matrix feats = forward(params, x, &cache);
            Matrix logits = affine_forward(feats, head);
            if (!all_finite(logits))
                throw numeric_error("pretrain diverged at epoch " + std::to_string(epoch));
            Matrix probs = probabilities(logits);
            CrossEntropy ce = cross_entropy(probs, y);
            loss_sum += ce.loss * static_cast<double>(n);

            // Head gradients and the upstream into the extractor.
            MlpLayer head_g{Matrix(num_classes, d), Vec(num_classes, 0.0)};
            Matrix dfeats(n, d, 0.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t c = 0; c < num_classes; ++c) {
                    double gc = ce.logit_grad(i, c);
                    if (gc == 0.0) continue;
                    head_g.bias[c] += gc;
                    for (std::size_t k = 0; k < d; ++k) {
                        head_g.weight(c, k) += gc * feats(i, k);
                        dfeats(i, k) += gc * head.weight(c, k);
                    }
                }
            Gradients body_g = backward(params, cache, dfeats);

            std::vector<MlpLayer> head_grads{head_g};
            std::vector<MlpLayer> head_vals{head};
            head_m.apply(head_vals, head_grads, cfg.lr, cfg.momentum);
            head = head_vals[0];
            body_m.apply(params.layers, body_g.layers, cfg.lr, cfg.momentum);
        }
        double epoch_loss = loss_sum / static_cast<double>(order.size());
        if (!std::isfinite(epoch_loss))
            throw numeric_error("pretrain diverged at epoch " + std::to_string(epoch));
        epoch_losses.push_back(epoch_loss);
    }
    return {std::move(params), std::move(head), std::move(epoch_losses)};
}

MlpParams pretrain(const MlpParams& init, const Dataset& base, const PretrainConfig& cfg) {
    return pretrain_with_head(init, base, cfg).params;
}

double classification_accuracy(const MlpParams& params, const Dataset& d, const MlpLayer& head) {
    if (d.examples.empty()) return 0.0;
    std::size_t correct = 0;
    for (const auto& ex : d.examples) {
        Matrix x(1, d.dim);
        for (std::size_t k = 0; k < d.dim; ++k) x(0, k) = ex.input[k];
        Matrix logits = affine_forward(forward(params, x), head);
        if (argmax_tie_low(logits.row(0)) == static_cast<std::size_t>(ex.label)) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(d.examples.size());
}

namespace {
constexpr char kCheckpointMagic[8] = {'F', 'T', 'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const MlpParams& params, const std::string& path) {
    params.validate();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw format_error(path + ": cannot open for writing");
    f.write(kCheckpointMagic, sizeof kCheckpointMagic);
    std::uint32_t n = static_cast<std::uint32_t>(params.layers.size());
    f.write(reinterpret_cast<const char*>(&n), sizeof n);
    for (const auto& l : params.layers) {
        std::uint32_t dims[2] = {static_cast<std::uint32_t>(l.weight.rows()),
                                 static_cast<std::uint32_t>(l.weight.cols())};
        f.write(reinterpret_cast<const char*>(dims), sizeof dims);
    }
    for (const auto& l : params.layers) {
        f.write(reinterpret_cast<const char*>(l.weight.data()),
                static_cast<std::streamsize>(l.weight.size() * sizeof(double)));
        f.write(reinterpret_cast<const char*>(l.bias.data()),
                static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
    }
    if (!f) throw format_error(path + ": write failed");
}

MlpParams load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw format_error(path + ": cannot open");
    char magic[8];
    f.read(magic, sizeof magic);
    if (f.gcount() != sizeof magic || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
        throw format_error(path + ": not a backbone checkpoint (bad magic)");
    std::uint32_t n = 0;
    f.read(reinterpret_cast<char*>(&n), sizeof n);
    if (!f || n == 0 || n > 64) throw format_error(path + ": corrupt layer count");
    std::vector<std::pair<std::uint32_t, std::uint32_t>> shapes(n);
    for (auto& s : shapes) {
        std::uint32_t dims[2];
        f.read(reinterpret_cast<char*>(dims), sizeof dims);
        if (!f) throw format_error(path + ": truncated shape header");
        s = {dims[0], dims[1]};
    }
    MlpParams p;
    for (auto [rows, cols] : shapes) {
        MlpLayer l{Matrix(rows, cols), Vec(rows, 0.0)};
        f.read(reinterpret_cast<char*>(l.weight.data()),
               static_cast<std::streamsize>(l.weight.size() * sizeof(double)));
        f.read(reinterpret_cast<char*>(l.bias.data()),
               static_cast<std::streamsize>(l.bias.size() * sizeof(double)));
        if (!f) throw format_error(path + ": truncated parameter payload");
        p.layers.push_back(std::move(l));
    }
    p.validate();
    return p;
}

} // namespace fewtune

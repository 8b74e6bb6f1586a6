#include "weightspace/zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include <json.hpp>

#include "weightspace/errors.hpp"
#include "weightspace/parallel.hpp"
#include "weightspace/rng.hpp"
#include "weightspace/sampler.hpp"

namespace weightspace {

namespace {

constexpr double kBnEpsilon = 1e-5;
constexpr double kBnTrainMomentum = 0.1;

// ---------------------------------------------------------------------------
// Shared net helpers
// ---------------------------------------------------------------------------

Matrix to_matrix(const LayerTensor& layer, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) {
        m.data()[i] = static_cast<double>(layer.data[i]);
    }
    return m;
}

LayerTensor to_layer(const std::string& name, const std::vector<std::size_t>& shape,
                     const Matrix& m) {
    LayerTensor layer;
    layer.name = name;
    layer.shape = shape;
    layer.data.resize(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) {
        layer.data[i] = static_cast<float>(m.data()[i]);
    }
    return layer;
}

const LayerTensor& required_layer(const WeightCheckpoint& w, const std::string& name,
                                  std::size_t expected) {
    const LayerTensor* layer = w.find(name);
    if (layer == nullptr) throw LayoutMismatch("checkpoint is missing layer '" + name + "'");
    if (layer->data.size() != expected) {
        throw LayoutMismatch("layer '" + name + "' has the wrong size");
    }
    return *layer;
}

void sgd_update(Matrix& param, Matrix& velocity, const Matrix& grad, double lr,
                double momentum) {
    for (std::size_t i = 0; i < param.size(); ++i) {
        velocity.data()[i] = momentum * velocity.data()[i] + grad.data()[i];
        param.data()[i] -= lr * velocity.data()[i];
    }
}

// Mean cross-entropy over rows plus the softmax-CE logit gradient (already
// divided by the batch size).
double softmax_ce(const Matrix& logits, const int* labels, Matrix* dlogits) {
    const std::size_t batch = logits.rows();
    const std::size_t classes = logits.cols();
    double loss = 0.0;
    if (dlogits != nullptr) *dlogits = Matrix(batch, classes);
    for (std::size_t b = 0; b < batch; ++b) {
        double mx = logits(b, 0);
        for (std::size_t c = 1; c < classes; ++c) mx = std::max(mx, logits(b, c));
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) sum += std::exp(logits(b, c) - mx);
        const double logz = mx + std::log(sum);
        loss += logz - logits(b, static_cast<std::size_t>(labels[b]));
        if (dlogits != nullptr) {
            for (std::size_t c = 0; c < classes; ++c) {
                const double p = std::exp(logits(b, c) - logz);
                (*dlogits)(b, c) =
                    (p - (c == static_cast<std::size_t>(labels[b]) ? 1.0 : 0.0)) /
                    static_cast<double>(batch);
            }
        }
    }
    return loss / static_cast<double>(batch);
}

std::size_t argmax_row(const Matrix& m, std::size_t row) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < m.cols(); ++c) {
        if (m(row, c) > m(row, best)) best = c;  // ties keep the lowest index
    }
    return best;
}

Matrix gather_rows(const Matrix& x, const std::vector<std::size_t>& rows, std::size_t begin,
                   std::size_t end) {
    Matrix out(end - begin, x.cols());
    for (std::size_t i = begin; i < end; ++i) {
        for (std::size_t j = 0; j < x.cols(); ++j) out(i - begin, j) = x(rows[i], j);
    }
    return out;
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

class MlpModel {
public:
    explicit MlpModel(const ArchitectureSpec& spec) : spec_(spec) {
        dims_.push_back(spec.input_dim);
        for (std::size_t w : spec.widths) dims_.push_back(w);
        dims_.push_back(spec.num_classes);
        for (std::size_t i = 0; i + 1 < dims_.size(); ++i) {
            weights_.emplace_back(dims_[i + 1], dims_[i]);
            biases_.emplace_back(1, dims_[i + 1]);
            vel_w_.emplace_back(dims_[i + 1], dims_[i]);
            vel_b_.emplace_back(1, dims_[i + 1]);
        }
    }

    void init_params(Rng& rng) {
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const double limit = 1.0 / std::sqrt(static_cast<double>(weights_[l].cols()));
            for (std::size_t i = 0; i < weights_[l].size(); ++i) {
                weights_[l].data()[i] = rng.uniform(-limit, limit);
            }
            for (std::size_t i = 0; i < biases_[l].size(); ++i) {
                biases_[l].data()[i] = rng.uniform(-limit, limit);
            }
        }
    }

    void load(const WeightCheckpoint& w) {
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const std::string prefix = "fc" + std::to_string(l);
            weights_[l] = to_matrix(required_layer(w, prefix + ".weight", weights_[l].size()),
                                    dims_[l + 1], dims_[l]);
            biases_[l] = to_matrix(required_layer(w, prefix + ".bias", biases_[l].size()), 1,
                                   dims_[l + 1]);
        }
    }

    WeightCheckpoint checkpoint() const {
        WeightCheckpoint out;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            const std::string prefix = "fc" + std::to_string(l);
            out.layers.push_back(
                to_layer(prefix + ".weight", {dims_[l + 1], dims_[l]}, weights_[l]));
            out.layers.push_back(to_layer(prefix + ".bias", {dims_[l + 1]}, biases_[l]));
        }
        return out;
    }

    Matrix logits(const Matrix& x) const {
        Matrix h = x;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            Matrix z = matmul_nt(h, weights_[l]);
            for (std::size_t i = 0; i < z.rows(); ++i) {
                for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += biases_[l](0, j);
            }
            if (l + 1 < weights_.size()) {
                for (std::size_t i = 0; i < z.size(); ++i) {
                    z.data()[i] = std::max(0.0, z.data()[i]);
                }
            }
            h = std::move(z);
        }
        return h;
    }

    double train_epoch(const Matrix& x, const std::vector<int>& y, double lr, double momentum,
                       std::size_t batch_size, Rng& rng) {
        std::vector<std::size_t> order(x.rows());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            const std::size_t end = std::min(begin + batch_size, order.size());
            Matrix xb = gather_rows(x, order, begin, end);
            std::vector<int> yb(end - begin);
            for (std::size_t i = begin; i < end; ++i) yb[i - begin] = y[order[i]];
            loss_sum += train_step(xb, yb, lr, momentum);
            ++steps;
        }
        return loss_sum / static_cast<double>(steps);
    }

private:
    double train_step(const Matrix& xb, const std::vector<int>& yb, double lr,
                      double momentum) {
        std::vector<Matrix> acts{xb};  // post-activation per layer
        std::vector<Matrix> pre;
        for (std::size_t l = 0; l < weights_.size(); ++l) {
            Matrix z = matmul_nt(acts.back(), weights_[l]);
            for (std::size_t i = 0; i < z.rows(); ++i) {
                for (std::size_t j = 0; j < z.cols(); ++j) z(i, j) += biases_[l](0, j);
            }
            pre.push_back(z);
            if (l + 1 < weights_.size()) {
                for (std::size_t i = 0; i < z.size(); ++i) {
                    z.data()[i] = std::max(0.0, z.data()[i]);
                }
            }
            acts.push_back(std::move(z));
        }

        Matrix dz;
        const double loss = softmax_ce(acts.back(), yb.data(), &dz);

        for (std::size_t l = weights_.size(); l-- > 0;) {
            const Matrix dw = matmul_tn(dz, acts[l]);
            Matrix db(1, dz.cols());
            for (std::size_t i = 0; i < dz.rows(); ++i) {
                for (std::size_t j = 0; j < dz.cols(); ++j) db(0, j) += dz(i, j);
            }
            Matrix dprev;
            if (l > 0) {
                dprev = matmul(dz, weights_[l]);
                for (std::size_t i = 0; i < dprev.size(); ++i) {
                    if (pre[l - 1].data()[i] <= 0.0) dprev.data()[i] = 0.0;
                }
            }
            sgd_update(weights_[l], vel_w_[l], dw, lr, momentum);
            sgd_update(biases_[l], vel_b_[l], db, lr, momentum);
            if (l > 0) dz = std::move(dprev);
        }
        return loss;
    }

    ArchitectureSpec spec_;
    std::vector<std::size_t> dims_;
    std::vector<Matrix> weights_, biases_;
    std::vector<Matrix> vel_w_, vel_b_;
};

// ---------------------------------------------------------------------------
// Conv + BN (1-D, kernel 3, padding 1, global average pool head)
// ---------------------------------------------------------------------------

class ConvBnModel {
public:
    explicit ConvBnModel(const ArchitectureSpec& spec)
        : spec_(spec), length_(spec.input_dim) {
        std::size_t in_ch = 1;
        for (std::size_t out_ch : spec.widths) {
            Stage s;
            s.in_ch = in_ch;
            s.out_ch = out_ch;
            s.conv_w = Matrix(out_ch, in_ch * 3);
            s.conv_b = Matrix(1, out_ch);
            s.bn_gain = Matrix(1, out_ch, 1.0);
            s.bn_bias = Matrix(1, out_ch);
            s.bn_mean = Matrix(1, out_ch);
            s.bn_var = Matrix(1, out_ch, 1.0);
            s.v_conv_w = Matrix::zeros_like(s.conv_w);
            s.v_conv_b = Matrix::zeros_like(s.conv_b);
            s.v_bn_gain = Matrix::zeros_like(s.bn_gain);
            s.v_bn_bias = Matrix::zeros_like(s.bn_bias);
            stages_.push_back(std::move(s));
            in_ch = out_ch;
        }
        head_w_ = Matrix(spec.num_classes, in_ch);
        head_b_ = Matrix(1, spec.num_classes);
        v_head_w_ = Matrix::zeros_like(head_w_);
        v_head_b_ = Matrix::zeros_like(head_b_);
    }

    void init_params(Rng& rng) {
        for (auto& s : stages_) {
            const double limit = 1.0 / std::sqrt(static_cast<double>(s.in_ch * 3));
            for (std::size_t i = 0; i < s.conv_w.size(); ++i) {
                s.conv_w.data()[i] = rng.uniform(-limit, limit);
            }
            for (std::size_t i = 0; i < s.conv_b.size(); ++i) {
                s.conv_b.data()[i] = rng.uniform(-limit, limit);
            }
        }
        const double limit = 1.0 / std::sqrt(static_cast<double>(head_w_.cols()));
        for (std::size_t i = 0; i < head_w_.size(); ++i) {
            head_w_.data()[i] = rng.uniform(-limit, limit);
        }
        for (std::size_t i = 0; i < head_b_.size(); ++i) {
            head_b_.data()[i] = rng.uniform(-limit, limit);
        }
    }

    void load(const WeightCheckpoint& w) {
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            auto& s = stages_[i];
            const std::string conv = "conv" + std::to_string(i);
            const std::string bn = "bn" + std::to_string(i);
            s.conv_w = to_matrix(required_layer(w, conv + ".weight", s.conv_w.size()),
                                 s.out_ch, s.in_ch * 3);
            s.conv_b = to_matrix(required_layer(w, conv + ".bias", s.out_ch), 1, s.out_ch);
            s.bn_gain = to_matrix(required_layer(w, bn + ".weight", s.out_ch), 1, s.out_ch);
            s.bn_bias = to_matrix(required_layer(w, bn + ".bias", s.out_ch), 1, s.out_ch);
            s.bn_mean =
                to_matrix(required_layer(w, bn + ".running_mean", s.out_ch), 1, s.out_ch);
            s.bn_var =
                to_matrix(required_layer(w, bn + ".running_var", s.out_ch), 1, s.out_ch);
        }
        head_w_ = to_matrix(required_layer(w, "head.weight", head_w_.size()),
                            spec_.num_classes, head_w_.cols());
        head_b_ = to_matrix(required_layer(w, "head.bias", spec_.num_classes), 1,
                            spec_.num_classes);
    }

    WeightCheckpoint checkpoint() const {
        WeightCheckpoint out;
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            const auto& s = stages_[i];
            const std::string conv = "conv" + std::to_string(i);
            const std::string bn = "bn" + std::to_string(i);
            out.layers.push_back(to_layer(conv + ".weight", {s.out_ch, s.in_ch, 3}, s.conv_w));
            out.layers.push_back(to_layer(conv + ".bias", {s.out_ch}, s.conv_b));
            out.layers.push_back(to_layer(bn + ".weight", {s.out_ch}, s.bn_gain));
            out.layers.push_back(to_layer(bn + ".bias", {s.out_ch}, s.bn_bias));
            out.layers.push_back(to_layer(bn + ".running_mean", {s.out_ch}, s.bn_mean));
            out.layers.push_back(to_layer(bn + ".running_var", {s.out_ch}, s.bn_var));
            out.non_trainable_names.insert(bn + ".running_mean");
            out.non_trainable_names.insert(bn + ".running_var");
        }
        out.layers.push_back(
            to_layer("head.weight", {spec_.num_classes, head_w_.cols()}, head_w_));
        out.layers.push_back(to_layer("head.bias", {spec_.num_classes}, head_b_));
        return out;
    }

    Matrix logits(const Matrix& x) const {
        Matrix map = x;  // [B x C*L], starts with C=1
        for (const auto& s : stages_) {
            Matrix z = conv_forward(s, map);
            bn_eval(s, z);
            relu(z);
            map = std::move(z);
        }
        return head_forward(map);
    }

    double train_epoch(const Matrix& x, const std::vector<int>& y, double lr, double momentum,
                       std::size_t batch_size, Rng& rng) {
        std::vector<std::size_t> order(x.rows());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);

        double loss_sum = 0.0;
        std::size_t steps = 0;
        for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
            const std::size_t end = std::min(begin + batch_size, order.size());
            Matrix xb = gather_rows(x, order, begin, end);
            std::vector<int> yb(end - begin);
            for (std::size_t i = begin; i < end; ++i) yb[i - begin] = y[order[i]];
            loss_sum += train_step(xb, yb, lr, momentum);
            ++steps;
        }
        return loss_sum / static_cast<double>(steps);
    }

    // Forward with batch statistics, updating only the running estimates.
    void condition_pass(const Matrix& x, double momentum) {
        Matrix map = x;
        for (auto& s : stages_) {
            Matrix z = conv_forward(s, map);
            Matrix xhat;
            std::vector<double> inv_std;
            bn_train(s, z, momentum, xhat, inv_std);
            relu(z);
            map = std::move(z);
        }
    }

private:
    struct Stage {
        std::size_t in_ch = 0, out_ch = 0;
        Matrix conv_w, conv_b;
        Matrix bn_gain, bn_bias, bn_mean, bn_var;
        Matrix v_conv_w, v_conv_b, v_bn_gain, v_bn_bias;
    };

    Matrix conv_forward(const Stage& s, const Matrix& in) const {
        const std::size_t batch = in.rows();
        const std::size_t L = length_;
        Matrix out(batch, s.out_ch * L);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t oc = 0; oc < s.out_ch; ++oc) {
                for (std::size_t x = 0; x < L; ++x) {
                    double acc = s.conv_b(0, oc);
                    for (std::size_t ic = 0; ic < s.in_ch; ++ic) {
                        for (std::size_t t = 0; t < 3; ++t) {
                            const std::ptrdiff_t src =
                                static_cast<std::ptrdiff_t>(x + t) - 1;
                            if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) continue;
                            acc += s.conv_w(oc, ic * 3 + t) *
                                   in(b, ic * L + static_cast<std::size_t>(src));
                        }
                    }
                    out(b, oc * L + x) = acc;
                }
            }
        }
        return out;
    }

    void bn_eval(const Stage& s, Matrix& z) const {
        const std::size_t L = length_;
        for (std::size_t b = 0; b < z.rows(); ++b) {
            for (std::size_t oc = 0; oc < s.out_ch; ++oc) {
                const double inv = 1.0 / std::sqrt(s.bn_var(0, oc) + kBnEpsilon);
                for (std::size_t x = 0; x < L; ++x) {
                    double& v = z(b, oc * L + x);
                    v = s.bn_gain(0, oc) * (v - s.bn_mean(0, oc)) * inv + s.bn_bias(0, oc);
                }
            }
        }
    }

    // Batch statistics forward; updates running estimates and leaves xhat and
    // the per-channel inverse std for the backward pass.
    void bn_train(Stage& s, Matrix& z, double momentum, Matrix& xhat,
                  std::vector<double>& inv_std) {
        const std::size_t L = length_;
        const std::size_t batch = z.rows();
        const double n = static_cast<double>(batch * L);
        xhat = Matrix(batch, s.out_ch * L);
        inv_std.assign(s.out_ch, 0.0);

        for (std::size_t oc = 0; oc < s.out_ch; ++oc) {
            double mean = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t x = 0; x < L; ++x) mean += z(b, oc * L + x);
            }
            mean /= n;
            double var = 0.0;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t x = 0; x < L; ++x) {
                    const double d = z(b, oc * L + x) - mean;
                    var += d * d;
                }
            }
            var /= n;

            s.bn_mean(0, oc) = (1.0 - momentum) * s.bn_mean(0, oc) + momentum * mean;
            s.bn_var(0, oc) = (1.0 - momentum) * s.bn_var(0, oc) + momentum * var;

            const double inv = 1.0 / std::sqrt(var + kBnEpsilon);
            inv_std[oc] = inv;
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t x = 0; x < L; ++x) {
                    const double h = (z(b, oc * L + x) - mean) * inv;
                    xhat(b, oc * L + x) = h;
                    z(b, oc * L + x) = s.bn_gain(0, oc) * h + s.bn_bias(0, oc);
                }
            }
        }
    }

    static void relu(Matrix& z) {
        for (std::size_t i = 0; i < z.size(); ++i) z.data()[i] = std::max(0.0, z.data()[i]);
    }

    Matrix head_forward(const Matrix& map) const {
        const std::size_t L = length_;
        const std::size_t ch = head_w_.cols();
        Matrix pooled(map.rows(), ch);
        for (std::size_t b = 0; b < map.rows(); ++b) {
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::size_t x = 0; x < L; ++x) acc += map(b, c * L + x);
                pooled(b, c) = acc / static_cast<double>(L);
            }
        }
        Matrix out = matmul_nt(pooled, head_w_);
        for (std::size_t b = 0; b < out.rows(); ++b) {
            for (std::size_t c = 0; c < out.cols(); ++c) out(b, c) += head_b_(0, c);
        }
        return out;
    }

    double train_step(const Matrix& xb, const std::vector<int>& yb, double lr,
                      double momentum) {
        const std::size_t batch = xb.rows();
        const std::size_t L = length_;

        struct Cache {
            Matrix input;   // stage input map
            Matrix xhat;    // normalized pre-scale activations
            Matrix bn_out;  // post-BN, pre-relu
            std::vector<double> inv_std;
        };
        std::vector<Cache> caches(stages_.size());

        Matrix map = xb;
        for (std::size_t i = 0; i < stages_.size(); ++i) {
            caches[i].input = map;
            Matrix z = conv_forward(stages_[i], map);
            bn_train(stages_[i], z, kBnTrainMomentum, caches[i].xhat, caches[i].inv_std);
            caches[i].bn_out = z;
            relu(z);
            map = std::move(z);
        }

        // Head
        const std::size_t ch = head_w_.cols();
        Matrix pooled(batch, ch);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < ch; ++c) {
                double acc = 0.0;
                for (std::size_t x = 0; x < L; ++x) acc += map(b, c * L + x);
                pooled(b, c) = acc / static_cast<double>(L);
            }
        }
        Matrix logits = matmul_nt(pooled, head_w_);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < logits.cols(); ++c) logits(b, c) += head_b_(0, c);
        }

        Matrix dlogits;
        const double loss = softmax_ce(logits, yb.data(), &dlogits);

        const Matrix dhead_w = matmul_tn(dlogits, pooled);
        Matrix dhead_b(1, logits.cols());
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < logits.cols(); ++c) dhead_b(0, c) += dlogits(b, c);
        }
        const Matrix dpooled = matmul(dlogits, head_w_);

        Matrix dmap(batch, ch * L);
        for (std::size_t b = 0; b < batch; ++b) {
            for (std::size_t c = 0; c < ch; ++c) {
                const double g = dpooled(b, c) / static_cast<double>(L);
                for (std::size_t x = 0; x < L; ++x) dmap(b, c * L + x) = g;
            }
        }

        sgd_update(head_w_, v_head_w_, dhead_w, lr, momentum);
        sgd_update(head_b_, v_head_b_, dhead_b, lr, momentum);

        for (std::size_t i = stages_.size(); i-- > 0;) {
            auto& s = stages_[i];
            const auto& cache = caches[i];
            const double n = static_cast<double>(batch * L);

            // Through relu
            for (std::size_t j = 0; j < dmap.size(); ++j) {
                if (cache.bn_out.data()[j] <= 0.0) dmap.data()[j] = 0.0;
            }

            // Through batch norm
            Matrix dz(batch, s.out_ch * L);
            Matrix dgain(1, s.out_ch), dbias(1, s.out_ch);
            for (std::size_t oc = 0; oc < s.out_ch; ++oc) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t x = 0; x < L; ++x) {
                        const std::size_t j = oc * L + x;
                        const double dy = dmap(b, j);
                        dgain(0, oc) += dy * cache.xhat(b, j);
                        dbias(0, oc) += dy;
                        const double dxhat = dy * s.bn_gain(0, oc);
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * cache.xhat(b, j);
                    }
                }
                for (std::size_t b = 0; b < batch; ++b) {
                    for (std::size_t x = 0; x < L; ++x) {
                        const std::size_t j = oc * L + x;
                        const double dxhat = dmap(b, j) * s.bn_gain(0, oc);
                        dz(b, j) = cache.inv_std[oc] *
                                   (dxhat - sum_dxhat / n -
                                    cache.xhat(b, j) * sum_dxhat_xhat / n);
                    }
                }
            }

            // Through conv
            Matrix dw = Matrix::zeros_like(s.conv_w);
            Matrix db(1, s.out_ch);
            Matrix din(batch, s.in_ch * L);
            for (std::size_t b = 0; b < batch; ++b) {
                for (std::size_t oc = 0; oc < s.out_ch; ++oc) {
                    for (std::size_t x = 0; x < L; ++x) {
                        const double g = dz(b, oc * L + x);
                        db(0, oc) += g;
                        for (std::size_t ic = 0; ic < s.in_ch; ++ic) {
                            for (std::size_t t = 0; t < 3; ++t) {
                                const std::ptrdiff_t src =
                                    static_cast<std::ptrdiff_t>(x + t) - 1;
                                if (src < 0 || src >= static_cast<std::ptrdiff_t>(L)) {
                                    continue;
                                }
                                dw(oc, ic * 3 + t) +=
                                    g * cache.input(b, ic * L + static_cast<std::size_t>(src));
                                din(b, ic * L + static_cast<std::size_t>(src)) +=
                                    g * s.conv_w(oc, ic * 3 + t);
                            }
                        }
                    }
                }
            }

            sgd_update(s.conv_w, s.v_conv_w, dw, lr, momentum);
            sgd_update(s.conv_b, s.v_conv_b, db, lr, momentum);
            sgd_update(s.bn_gain, s.v_bn_gain, dgain, lr, momentum);
            sgd_update(s.bn_bias, s.v_bn_bias, dbias, lr, momentum);
            dmap = std::move(din);
        }
        return loss;
    }

    ArchitectureSpec spec_;
    std::size_t length_;
    std::vector<Stage> stages_;
    Matrix head_w_, head_b_;
    Matrix v_head_w_, v_head_b_;
};

Matrix model_logits(const WeightCheckpoint& w, const ArchitectureSpec& arch, const Matrix& x) {
    if (arch.kind == ArchKind::Mlp) {
        MlpModel model(arch);
        model.load(w);
        return model.logits(x);
    }
    ConvBnModel model(arch);
    model.load(w);
    return model.logits(x);
}

double accuracy_on(const WeightCheckpoint& w, const ArchitectureSpec& arch, const Matrix& x,
                   const std::vector<int>& y) {
    const Matrix out = model_logits(w, arch, x);
    std::size_t correct = 0;
    for (std::size_t b = 0; b < out.rows(); ++b) {
        if (argmax_row(out, b) == static_cast<std::size_t>(y[b])) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(out.rows());
}

// ---------------------------------------------------------------------------
// JSON helpers
// ---------------------------------------------------------------------------

nlohmann::json arch_to_json(const ArchitectureSpec& a) {
    return {{"id", a.id},           {"kind", to_string(a.kind)},
            {"widths", a.widths},   {"input_dim", a.input_dim},
            {"num_classes", a.num_classes}, {"has_bn", a.has_bn}};
}

ArchitectureSpec arch_from_json(const nlohmann::json& j) {
    ArchitectureSpec a;
    a.id = j.at("id").get<std::string>();
    a.kind = arch_kind_from_string(j.at("kind").get<std::string>());
    a.widths = j.at("widths").get<std::vector<std::size_t>>();
    a.input_dim = j.at("input_dim").get<std::size_t>();
    a.num_classes = j.at("num_classes").get<std::size_t>();
    a.has_bn = j.at("has_bn").get<bool>();
    return a;
}

nlohmann::json dataset_to_json(const SyntheticDataset& d) {
    return {{"id", d.id},
            {"generator", to_string(d.generator)},
            {"num_classes", d.num_classes},
            {"dimension", d.dimension},
            {"train_size", d.train_size},
            {"test_size", d.test_size},
            {"seed", d.seed}};
}

SyntheticDataset dataset_from_json(const nlohmann::json& j) {
    SyntheticDataset d;
    d.id = j.at("id").get<std::string>();
    d.generator = dataset_kind_from_string(j.at("generator").get<std::string>());
    d.num_classes = j.at("num_classes").get<std::size_t>();
    d.dimension = j.at("dimension").get<std::size_t>();
    d.train_size = j.at("train_size").get<std::size_t>();
    d.test_size = j.at("test_size").get<std::size_t>();
    d.seed = j.at("seed").get<std::uint64_t>();
    return d;
}

nlohmann::json record_to_json(const ZooRecord& r) {
    return {{"model_id", r.model_id},       {"checkpoint", r.checkpoint},
            {"arch_id", r.arch_id},         {"dataset_id", r.dataset_id},
            {"epoch", r.epoch},             {"test_accuracy", r.test_accuracy},
            {"train_accuracy", r.train_accuracy}, {"ggap", r.ggap}};
}

ZooRecord record_from_json(const nlohmann::json& j) {
    ZooRecord r;
    r.model_id = j.at("model_id").get<std::string>();
    r.checkpoint = j.at("checkpoint").get<std::string>();
    r.arch_id = j.at("arch_id").get<std::string>();
    r.dataset_id = j.at("dataset_id").get<std::string>();
    r.epoch = j.at("epoch").get<std::size_t>();
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.train_accuracy = j.at("train_accuracy").get<double>();
    r.ggap = j.at("ggap").get<double>();
    return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

std::string to_string(ArchKind kind) { return kind == ArchKind::Mlp ? "mlp" : "conv_bn"; }

ArchKind arch_kind_from_string(const std::string& name) {
    if (name == "mlp") return ArchKind::Mlp;
    if (name == "conv_bn") return ArchKind::ConvBn;
    throw ConfigError("unknown architecture kind: " + name);
}

std::string to_string(DatasetKind kind) {
    return kind == DatasetKind::GaussianBlobs ? "gaussian_blobs" : "two_rings";
}

DatasetKind dataset_kind_from_string(const std::string& name) {
    if (name == "gaussian_blobs") return DatasetKind::GaussianBlobs;
    if (name == "two_rings") return DatasetKind::TwoRings;
    throw ConfigError("unknown dataset kind: " + name);
}

void ArchitectureSpec::validate() const {
    if (input_dim == 0 || num_classes < 2) {
        throw ConfigError("architecture needs input_dim >= 1 and >= 2 classes");
    }
    // An empty width list is the linear classifier member of the MLP family.
    if (kind == ArchKind::ConvBn && widths.empty()) {
        throw ConfigError("conv architectures need at least one stage");
    }
    for (std::size_t w : widths) {
        if (w == 0) throw ConfigError("architecture widths must be positive");
    }
    if (kind == ArchKind::ConvBn && !has_bn) {
        throw ConfigError("conv architectures carry batch norm");
    }
}

Layout ArchitectureSpec::layout() const {
    validate();
    Layout out;
    if (kind == ArchKind::Mlp) {
        std::size_t in = input_dim;
        for (std::size_t l = 0; l <= widths.size(); ++l) {
            const std::size_t width = l < widths.size() ? widths[l] : num_classes;
            const std::string prefix = "fc" + std::to_string(l);
            out.entries.push_back({prefix + ".weight", {width, in}});
            out.entries.push_back({prefix + ".bias", {width}});
            in = width;
        }
    } else {
        std::size_t in = 1;
        for (std::size_t i = 0; i < widths.size(); ++i) {
            const std::string conv = "conv" + std::to_string(i);
            const std::string bn = "bn" + std::to_string(i);
            out.entries.push_back({conv + ".weight", {widths[i], in, 3}});
            out.entries.push_back({conv + ".bias", {widths[i]}});
            out.entries.push_back({bn + ".weight", {widths[i]}});
            out.entries.push_back({bn + ".bias", {widths[i]}});
            out.entries.push_back({bn + ".running_mean", {widths[i]}});
            out.entries.push_back({bn + ".running_var", {widths[i]}});
            out.non_trainable.insert(bn + ".running_mean");
            out.non_trainable.insert(bn + ".running_var");
            in = widths[i];
        }
        out.entries.push_back({"head.weight", {num_classes, in}});
        out.entries.push_back({"head.bias", {num_classes}});
    }
    return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

namespace {

void fill_blobs(const SyntheticDataset& spec, Rng& rng, const std::vector<Matrix>& means,
                std::size_t count, Matrix& x, std::vector<int>& y) {
    x = Matrix(count, spec.dimension);
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = i % spec.num_classes;
        y[i] = static_cast<int>(c);
        for (std::size_t j = 0; j < spec.dimension; ++j) {
            x(i, j) = means[c](0, j) + rng.normal();
        }
    }
}

void fill_rings(const SyntheticDataset& spec, Rng& rng, std::size_t count, Matrix& x,
                std::vector<int>& y) {
    x = Matrix(count, spec.dimension);
    y.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const std::size_t c = i % 2;
        y[i] = static_cast<int>(c);
        const double radius = (c == 0 ? 1.0 : 2.0) + 0.1 * rng.normal();
        const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
        x(i, 0) = radius * std::cos(angle);
        if (spec.dimension > 1) x(i, 1) = radius * std::sin(angle);
        for (std::size_t j = 2; j < spec.dimension; ++j) x(i, j) = 0.1 * rng.normal();
    }
}

}  // namespace

DatasetSplits make_dataset(const SyntheticDataset& spec) {
    if (spec.dimension == 0 || spec.num_classes < 2) {
        throw ConfigError("dataset needs dimension >= 1 and >= 2 classes");
    }
    if (spec.generator == DatasetKind::TwoRings && spec.num_classes != 2) {
        throw ConfigError("the two-rings generator is binary");
    }

    Rng base(spec.seed);
    DatasetSplits out;
    if (spec.generator == DatasetKind::GaussianBlobs) {
        Rng mean_rng = base.split(0);
        std::vector<Matrix> means;
        for (std::size_t c = 0; c < spec.num_classes; ++c) {
            Matrix m(1, spec.dimension);
            double norm = 0.0;
            for (std::size_t j = 0; j < spec.dimension; ++j) {
                m(0, j) = mean_rng.normal();
                norm += m(0, j) * m(0, j);
            }
            norm = std::max(std::sqrt(norm), 1e-9);
            // Class centers sit 4 units from the origin in random directions.
            for (std::size_t j = 0; j < spec.dimension; ++j) m(0, j) *= 4.0 / norm;
            means.push_back(std::move(m));
        }
        Rng train_rng = base.split(1);
        Rng test_rng = base.split(2);
        fill_blobs(spec, train_rng, means, spec.train_size, out.train_x, out.train_y);
        fill_blobs(spec, test_rng, means, spec.test_size, out.test_x, out.test_y);
    } else {
        Rng train_rng = base.split(1);
        Rng test_rng = base.split(2);
        fill_rings(spec, train_rng, spec.train_size, out.train_x, out.train_y);
        fill_rings(spec, test_rng, spec.test_size, out.test_x, out.test_y);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Zoo generation
// ---------------------------------------------------------------------------

ZooConfig default_zoo_config(std::uint64_t seed) {
    ZooConfig cfg;
    cfg.seed = seed;
    cfg.specs = {
        {"mlp_16_8", ArchKind::Mlp, {16, 8}, 8, 2, false},
        {"mlp_12", ArchKind::Mlp, {12}, 8, 2, false},
        {"mlp_24_12", ArchKind::Mlp, {24, 12}, 8, 2, false},
        {"mlp_8_8", ArchKind::Mlp, {8, 8}, 8, 2, false},
        {"conv_4_8", ArchKind::ConvBn, {4, 8}, 8, 2, true},
        {"conv_6_6", ArchKind::ConvBn, {6, 6}, 8, 2, true},
    };
    cfg.datasets = {
        {"blobs2", DatasetKind::GaussianBlobs, 2, 8, 256, 128, seed ^ 0xb10b5},
        {"rings2", DatasetKind::TwoRings, 2, 8, 256, 128, seed ^ 0x21465},
    };
    cfg.epochs = 6;
    cfg.checkpoints_at = {1, 2, 3, 4, 5, 6};
    return cfg;
}

ZooConfig smoke_zoo_config(std::uint64_t seed) {
    ZooConfig cfg;
    cfg.seed = seed;
    cfg.specs = {
        {"mlp_12", ArchKind::Mlp, {12}, 8, 2, false},
        {"mlp_16_8", ArchKind::Mlp, {16, 8}, 8, 2, false},
        {"conv_4_8", ArchKind::ConvBn, {4, 8}, 8, 2, true},
    };
    cfg.datasets = {
        {"blobs2", DatasetKind::GaussianBlobs, 2, 8, 128, 64, seed ^ 0xb10b5},
    };
    cfg.epochs = 4;
    cfg.checkpoints_at = {1, 2, 3, 4};
    return cfg;
}

std::vector<ZooRecord> generate_zoo(const ZooConfig& cfg,
                                    const std::filesystem::path& out_dir) {
    if (cfg.specs.empty() || cfg.datasets.empty()) {
        throw ConfigError("zoo needs at least one architecture and one dataset");
    }
    if (cfg.checkpoints_at.empty()) throw EmptySchedule("no checkpoint epochs requested");
    for (std::size_t e : cfg.checkpoints_at) {
        if (e == 0 || e > cfg.epochs) {
            throw ConfigError("checkpoint epochs must lie in [1, epochs]");
        }
    }
    for (const auto& spec : cfg.specs) spec.validate();
    std::filesystem::create_directories(out_dir);

    struct Member {
        const ArchitectureSpec* arch;
        const SyntheticDataset* dataset;
    };
    std::vector<Member> members;
    for (const auto& spec : cfg.specs) {
        for (const auto& ds : cfg.datasets) members.push_back({&spec, &ds});
    }

    const Rng base(cfg.seed);
    std::vector<std::vector<ZooRecord>> per_member(members.size());

    parallel_for(members.size(), [&](std::size_t m) {
        const ArchitectureSpec& arch = *members[m].arch;
        const SyntheticDataset& ds = *members[m].dataset;
        const DatasetSplits data = make_dataset(ds);

        Rng init_rng = base.split(m * 2 + 1);
        Rng shuffle_rng = base.split(m * 2 + 2);

        MlpModel mlp(arch);
        ConvBnModel conv(arch);
        const bool is_mlp = arch.kind == ArchKind::Mlp;
        if (is_mlp) {
            mlp.init_params(init_rng);
        } else {
            conv.init_params(init_rng);
        }

        const std::string member_id = arch.id + "__" + ds.id;
        auto& records = per_member[m];

        for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
            const double loss =
                is_mlp ? mlp.train_epoch(data.train_x, data.train_y, cfg.learning_rate,
                                         cfg.momentum, cfg.batch_size, shuffle_rng)
                       : conv.train_epoch(data.train_x, data.train_y, cfg.learning_rate,
                                          cfg.momentum, cfg.batch_size, shuffle_rng);
            if (!std::isfinite(loss)) {
                ZooRecord bad;
                bad.model_id = member_id + "__e" + std::to_string(epoch);
                bad.arch_id = arch.id;
                bad.dataset_id = ds.id;
                bad.epoch = epoch;
                bad.diverged = true;
                records.push_back(std::move(bad));
                return;
            }
            if (std::find(cfg.checkpoints_at.begin(), cfg.checkpoints_at.end(), epoch) ==
                cfg.checkpoints_at.end()) {
                continue;
            }

            const WeightCheckpoint ckpt = is_mlp ? mlp.checkpoint() : conv.checkpoint();
            ZooRecord record;
            record.model_id = member_id + "__e" + std::to_string(epoch);
            record.checkpoint = record.model_id + ".st";
            record.arch_id = arch.id;
            record.dataset_id = ds.id;
            record.epoch = epoch;
            record.test_accuracy = accuracy_on(ckpt, arch, data.test_x, data.test_y);
            record.train_accuracy = accuracy_on(ckpt, arch, data.train_x, data.train_y);
            record.ggap = record.train_accuracy - record.test_accuracy;
            save_checkpoint(ckpt, out_dir / record.checkpoint);
            records.push_back(std::move(record));
        }
    });

    std::vector<ZooRecord> all;
    for (auto& records : per_member) {
        for (auto& r : records) all.push_back(std::move(r));
    }

    // Zoo manifest (one record per line, diverged members omitted).
    std::ofstream zoo_out(out_dir / "zoo.jsonl", std::ios::trunc);
    if (!zoo_out) throw IoError("cannot write zoo.jsonl");
    for (const auto& r : all) {
        if (!r.diverged) zoo_out << record_to_json(r).dump() << '\n';
    }

    nlohmann::json meta;
    meta["archs"] = nlohmann::json::object();
    for (const auto& spec : cfg.specs) meta["archs"][spec.id] = arch_to_json(spec);
    meta["datasets"] = nlohmann::json::object();
    for (const auto& ds : cfg.datasets) meta["datasets"][ds.id] = dataset_to_json(ds);
    meta["epochs"] = cfg.epochs;
    meta["checkpoints_at"] = cfg.checkpoints_at;
    meta["learning_rate"] = cfg.learning_rate;
    meta["momentum"] = cfg.momentum;
    meta["batch_size"] = cfg.batch_size;
    meta["seed"] = cfg.seed;
    nlohmann::json diverged = nlohmann::json::array();
    for (const auto& r : all) {
        if (r.diverged) diverged.push_back(r.model_id);
    }
    meta["diverged"] = diverged;
    std::ofstream meta_out(out_dir / "zoo_meta.json", std::ios::trunc);
    if (!meta_out) throw IoError("cannot write zoo_meta.json");
    meta_out << meta.dump(2) << '\n';

    std::vector<ManifestEntry> manifest;
    for (const auto& r : all) {
        if (r.diverged) continue;
        ManifestEntry entry;
        entry.path = out_dir / r.checkpoint;
        entry.model_id = r.model_id;
        const auto arch_it =
            std::find_if(cfg.specs.begin(), cfg.specs.end(),
                         [&](const ArchitectureSpec& s) { return s.id == r.arch_id; });
        entry.tags = {to_string(arch_it->kind), r.arch_id, r.dataset_id};
        manifest.push_back(std::move(entry));
    }
    write_manifest(manifest, out_dir / "manifest.json");
    return all;
}

ZooIndex load_zoo(const std::filesystem::path& dir) {
    ZooIndex index;
    index.dir = dir;

    std::ifstream meta_in(dir / "zoo_meta.json");
    if (!meta_in) throw IoError("missing zoo_meta.json in " + dir.string());
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_in);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("zoo_meta.json is not valid JSON: ") + e.what());
    }
    for (const auto& [id, j] : meta.at("archs").items()) index.archs[id] = arch_from_json(j);
    for (const auto& [id, j] : meta.at("datasets").items()) {
        index.datasets[id] = dataset_from_json(j);
    }

    std::ifstream zoo_in(dir / "zoo.jsonl");
    if (!zoo_in) throw IoError("missing zoo.jsonl in " + dir.string());
    std::string line;
    while (std::getline(zoo_in, line)) {
        if (line.empty()) continue;
        index.records.push_back(record_from_json(nlohmann::json::parse(line)));
    }
    return index;
}

// ---------------------------------------------------------------------------
// Evaluation and probing
// ---------------------------------------------------------------------------

double evaluate_weights(const WeightCheckpoint& w, const ArchitectureSpec& arch,
                        const SyntheticDataset& ds) {
    if (!w.layout().same_shapes(arch.layout())) {
        throw LayoutMismatch("checkpoint does not match the architecture");
    }
    const DatasetSplits data = make_dataset(ds);
    return accuracy_on(w, arch, data.test_x, data.test_y);
}

FinetuneResult finetune(const WeightCheckpoint& w, const ArchitectureSpec& arch,
                        const SyntheticDataset& ds, std::size_t epochs,
                        double learning_rate) {
    if (epochs == 0) throw ConfigError("finetune needs at least one epoch");
    if (!w.layout().same_shapes(arch.layout())) {
        throw LayoutMismatch("checkpoint does not match the architecture");
    }

    const DatasetSplits data = make_dataset(ds);
    Rng shuffle_rng = Rng(ds.seed).split(0xf17e);

    FinetuneResult result;
    if (arch.kind == ArchKind::Mlp) {
        MlpModel model(arch);
        model.load(w);
        for (std::size_t e = 0; e < epochs; ++e) {
            model.train_epoch(data.train_x, data.train_y, learning_rate, 0.9, 32,
                              shuffle_rng);
            result.accuracy.push_back(
                accuracy_on(model.checkpoint(), arch, data.test_x, data.test_y));
        }
        result.weights = model.checkpoint();
    } else {
        ConvBnModel model(arch);
        model.load(w);
        for (std::size_t e = 0; e < epochs; ++e) {
            model.train_epoch(data.train_x, data.train_y, learning_rate, 0.9, 32,
                              shuffle_rng);
            result.accuracy.push_back(
                accuracy_on(model.checkpoint(), arch, data.test_x, data.test_y));
        }
        result.weights = model.checkpoint();
    }
    result.weights.non_trainable_names = w.non_trainable_names;
    return result;
}

std::vector<double> mean_pool_embed(const Backbone& b, const WeightCheckpoint& w) {
    const TokenSequence seq = b.config.scheme == TokenScheme::Dense
                                  ? tokenize_dense(w, b.config.token_size)
                                  : tokenize_sparse(w, b.config.token_size);

    std::vector<double> pooled(b.config.latent_dim, 0.0);
    const std::size_t ws = b.config.window_size;
    for (std::size_t begin = 0; begin < seq.count(); begin += ws) {
        const std::size_t end = std::min(begin + ws, seq.count());
        const std::size_t rows = end - begin;
        Matrix tokens(rows, seq.token_size());
        Matrix mask(rows, seq.token_size());
        std::vector<TokenPosition> positions(seq.positions.begin() + begin,
                                             seq.positions.begin() + end);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < seq.token_size(); ++j) {
                tokens(i, j) = seq.tokens(begin + i, j);
                mask(i, j) = seq.mask(begin + i, j);
            }
        }
        const Matrix latents = encode(b, tokens, mask, positions);
        for (std::size_t i = 0; i < latents.rows(); ++i) {
            for (std::size_t j = 0; j < latents.cols(); ++j) pooled[j] += latents(i, j);
        }
    }
    for (double& v : pooled) v /= static_cast<double>(seq.count());
    return pooled;
}

double r2_score(const std::vector<double>& truth, const std::vector<double>& pred) {
    if (truth.size() != pred.size() || truth.empty()) {
        throw ShapeError("r2_score: size mismatch");
    }
    double mean = 0.0;
    for (double v : truth) mean += v;
    mean /= static_cast<double>(truth.size());

    double residual = 0.0, variance = 0.0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        residual += (truth[i] - pred[i]) * (truth[i] - pred[i]);
        variance += (truth[i] - mean) * (truth[i] - mean);
    }
    if (variance == 0.0) throw DegenerateTargets("r2_score: zero-variance targets");
    return 1.0 - residual / variance;
}

namespace {

// Gaussian elimination with partial pivoting; a is overwritten.
std::vector<double> solve_linear(Matrix a, std::vector<double> rhs) {
    const std::size_t n = a.rows();
    for (std::size_t col = 0; col < n; ++col) {
        std::size_t pivot = col;
        for (std::size_t r = col + 1; r < n; ++r) {
            if (std::abs(a(r, col)) > std::abs(a(pivot, col))) pivot = r;
        }
        if (pivot != col) {
            for (std::size_t c = 0; c < n; ++c) std::swap(a(col, c), a(pivot, c));
            std::swap(rhs[col], rhs[pivot]);
        }
        const double diag = a(col, col);
        if (diag == 0.0) throw DegenerateData("singular normal equations");
        for (std::size_t r = col + 1; r < n; ++r) {
            const double f = a(r, col) / diag;
            if (f == 0.0) continue;
            for (std::size_t c = col; c < n; ++c) a(r, c) -= f * a(col, c);
            rhs[r] -= f * rhs[col];
        }
    }
    std::vector<double> x(n);
    for (std::size_t r = n; r-- > 0;) {
        double acc = rhs[r];
        for (std::size_t c = r + 1; c < n; ++c) acc -= a(r, c) * x[c];
        x[r] = acc / a(r, r);
    }
    return x;
}

}  // namespace

double linear_probe(const Matrix& embeddings, const std::vector<double>& targets,
                    std::uint64_t split_seed) {
    const std::size_t m = embeddings.rows();
    if (m < 10) throw ConfigError("linear_probe needs at least 10 rows");
    if (targets.size() != m) throw ShapeError("linear_probe: target count mismatch");

    double tmean = 0.0;
    for (double v : targets) tmean += v;
    tmean /= static_cast<double>(m);
    double tvar = 0.0;
    for (double v : targets) tvar += (v - tmean) * (v - tmean);
    if (tvar == 0.0) throw DegenerateTargets("linear_probe: zero-variance targets");

    std::vector<std::size_t> order(m);
    for (std::size_t i = 0; i < m; ++i) order[i] = i;
    Rng rng(split_seed);
    rng.shuffle(order);

    const std::size_t n_train = m * 70 / 100;
    const std::size_t n_val = m * 15 / 100;
    const std::size_t n_test = m - n_train - n_val;

    const std::size_t d = embeddings.cols() + 1;  // intercept column
    auto feature = [&](std::size_t row, std::size_t j) {
        return j < embeddings.cols() ? embeddings(row, j) : 1.0;
    };

    Matrix normal(d, d);
    std::vector<double> rhs(d, 0.0);
    for (std::size_t i = 0; i < n_train; ++i) {
        const std::size_t row = order[i];
        for (std::size_t a = 0; a < d; ++a) {
            const double fa = feature(row, a);
            rhs[a] += fa * targets[row];
            for (std::size_t b = 0; b < d; ++b) normal(a, b) += fa * feature(row, b);
        }
    }
    for (std::size_t a = 0; a < d; ++a) normal(a, a) += 1e-6;
    const std::vector<double> beta = solve_linear(std::move(normal), std::move(rhs));

    std::vector<double> truth(n_test), pred(n_test);
    for (std::size_t i = 0; i < n_test; ++i) {
        const std::size_t row = order[n_train + n_val + i];
        truth[i] = targets[row];
        double acc = 0.0;
        for (std::size_t a = 0; a < d; ++a) acc += beta[a] * feature(row, a);
        pred[i] = acc;
    }
    return r2_score(truth, pred);
}

// ---------------------------------------------------------------------------
// Batch-norm conditioning (sampler interface; lives here with the nets)
// ---------------------------------------------------------------------------

WeightCheckpoint bn_condition(const WeightCheckpoint& w, const ArchitectureSpec& arch,
                              const SyntheticDataset& ds, std::size_t passes,
                              double momentum) {
    if (passes == 0) throw ConfigError("bn_condition needs at least one pass");
    if (momentum <= 0.0 || momentum > 1.0) {
        throw ConfigError("bn_condition momentum must be in (0, 1]");
    }
    if (arch.kind != ArchKind::ConvBn || !arch.has_bn) return w;  // nothing to condition
    if (!w.layout().same_shapes(arch.layout())) {
        throw LayoutMismatch("checkpoint does not match the architecture");
    }

    const DatasetSplits data = make_dataset(ds);
    const std::size_t batch = std::min<std::size_t>(64, data.train_x.rows());
    const std::size_t num_batches = (data.train_x.rows() + batch - 1) / batch;

    ConvBnModel model(arch);
    model.load(w);
    std::vector<std::size_t> order(data.train_x.rows());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (std::size_t pass = 0; pass < passes; ++pass) {
        const std::size_t begin = (pass % num_batches) * batch;
        const std::size_t end = std::min(begin + batch, order.size());
        model.condition_pass(gather_rows(data.train_x, order, begin, end), momentum);
    }

    WeightCheckpoint out = model.checkpoint();
    out.non_trainable_names = w.non_trainable_names.empty()
                                  ? out.non_trainable_names
                                  : w.non_trainable_names;
    return out;
}

}  // namespace weightspace

#include "weightspace/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "weightspace/errors.hpp"

namespace weightspace::ad {

namespace {

constexpr double kNormFloor = 1e-12;

double gauss_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double gauss_cdf(double x) { return 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2)); }

}  // namespace

NodeId Tape::push(Matrix value, std::function<void(Tape&)> backprop) {
    Node node;
    node.grad = Matrix::zeros_like(value);
    node.value = std::move(value);
    node.backprop = std::move(backprop);
    nodes_.push_back(std::move(node));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Matrix value) { return push(std::move(value), {}); }

NodeId Tape::matmul(NodeId a, NodeId b) {
    Matrix out = weightspace::matmul(value(a), value(b));
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [a, b, id](Tape& t) {
        const Matrix& go = t.grad(id);
        add_in_place(t.grad_mut(a), weightspace::matmul_nt(go, t.value(b)));
        add_in_place(t.grad_mut(b), weightspace::matmul_tn(t.value(a), go));
    };
    return id;
}

NodeId Tape::matmul_nt(NodeId a, NodeId b) {
    Matrix out = weightspace::matmul_nt(value(a), value(b));
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [a, b, id](Tape& t) {
        const Matrix& go = t.grad(id);
        add_in_place(t.grad_mut(a), weightspace::matmul(go, t.value(b)));
        add_in_place(t.grad_mut(b), weightspace::matmul_tn(go, t.value(a)));
    };
    return id;
}

NodeId Tape::add(NodeId a, NodeId b) {
    if (!value(a).same_shape(value(b))) throw ShapeError("tape add: shapes disagree");
    Matrix out = value(a);
    add_in_place(out, value(b));
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [a, b, id](Tape& t) {
        add_in_place(t.grad_mut(a), t.grad(id));
        add_in_place(t.grad_mut(b), t.grad(id));
    };
    return id;
}

NodeId Tape::add_row_broadcast(NodeId x, NodeId row) {
    const Matrix& xv = value(x);
    const Matrix& rv = value(row);
    if (rv.rows() != 1 || rv.cols() != xv.cols()) {
        throw ShapeError("tape add_row_broadcast: row must be [1 x cols]");
    }
    Matrix out = xv;
    for (std::size_t i = 0; i < out.rows(); ++i) {
        for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += rv(0, j);
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, row, id](Tape& t) {
        const Matrix& go = t.grad(id);
        add_in_place(t.grad_mut(x), go);
        Matrix& gr = t.grad_mut(row);
        for (std::size_t i = 0; i < go.rows(); ++i) {
            for (std::size_t j = 0; j < go.cols(); ++j) gr(0, j) += go(i, j);
        }
    };
    return id;
}

NodeId Tape::add_const(NodeId x, Matrix constant) {
    if (!value(x).same_shape(constant)) throw ShapeError("tape add_const: shapes disagree");
    Matrix out = value(x);
    add_in_place(out, constant);
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id](Tape& t) { add_in_place(t.grad_mut(x), t.grad(id)); };
    return id;
}

NodeId Tape::hadamard_const(NodeId x, Matrix constant) {
    if (!value(x).same_shape(constant)) {
        throw ShapeError("tape hadamard_const: shapes disagree");
    }
    Matrix out = value(x);
    for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= constant.data()[i];
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id, c = std::move(constant)](Tape& t) {
        const Matrix& go = t.grad(id);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < go.size(); ++i) gx.data()[i] += go.data()[i] * c.data()[i];
    };
    return id;
}

NodeId Tape::scale(NodeId x, double s) {
    Matrix out = value(x);
    scale_in_place(out, s);
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id, s](Tape& t) {
        const Matrix& go = t.grad(id);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < go.size(); ++i) gx.data()[i] += go.data()[i] * s;
    };
    return id;
}

NodeId Tape::layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
    const Matrix& xv = value(x);
    const std::size_t cols = xv.cols();
    if (value(gain).cols() != cols || value(bias).cols() != cols) {
        throw ShapeError("tape layer_norm: gain/bias width mismatch");
    }

    Matrix xhat(xv.rows(), cols);
    std::vector<double> inv_std(xv.rows());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double mean = 0.0;
        for (std::size_t j = 0; j < cols; ++j) mean += xv(i, j);
        mean /= static_cast<double>(cols);
        double var = 0.0;
        for (std::size_t j = 0; j < cols; ++j) {
            const double d = xv(i, j) - mean;
            var += d * d;
        }
        var /= static_cast<double>(cols);
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) xhat(i, j) = (xv(i, j) - mean) * inv_std[i];
    }

    Matrix out(xv.rows(), cols);
    const Matrix& g = value(gain);
    const Matrix& b = value(bias);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        for (std::size_t j = 0; j < cols; ++j) out(i, j) = xhat(i, j) * g(0, j) + b(0, j);
    }

    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, gain, bias, id, xhat = std::move(xhat),
                           inv_std = std::move(inv_std)](Tape& t) {
        const Matrix& go = t.grad(id);
        const Matrix& g = t.value(gain);
        Matrix& gx = t.grad_mut(x);
        Matrix& gg = t.grad_mut(gain);
        Matrix& gb = t.grad_mut(bias);
        const std::size_t cols = go.cols();
        for (std::size_t i = 0; i < go.rows(); ++i) {
            double mean_dxhat = 0.0;
            double mean_dxhat_xhat = 0.0;
            for (std::size_t j = 0; j < cols; ++j) {
                const double dxhat = go(i, j) * g(0, j);
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat(i, j);
                gg(0, j) += go(i, j) * xhat(i, j);
                gb(0, j) += go(i, j);
            }
            mean_dxhat /= static_cast<double>(cols);
            mean_dxhat_xhat /= static_cast<double>(cols);
            for (std::size_t j = 0; j < cols; ++j) {
                const double dxhat = go(i, j) * g(0, j);
                gx(i, j) +=
                    inv_std[i] * (dxhat - mean_dxhat - xhat(i, j) * mean_dxhat_xhat);
            }
        }
    };
    return id;
}

NodeId Tape::softmax_rows(NodeId x) {
    const Matrix& xv = value(x);
    Matrix out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double mx = xv(i, 0);
        for (std::size_t j = 1; j < xv.cols(); ++j) mx = std::max(mx, xv(i, j));
        double sum = 0.0;
        for (std::size_t j = 0; j < xv.cols(); ++j) {
            out(i, j) = std::exp(xv(i, j) - mx);
            sum += out(i, j);
        }
        for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) /= sum;
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id](Tape& t) {
        const Matrix& go = t.grad(id);
        const Matrix& y = t.value(id);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < go.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < go.cols(); ++j) dot += go(i, j) * y(i, j);
            for (std::size_t j = 0; j < go.cols(); ++j) {
                gx(i, j) += y(i, j) * (go(i, j) - dot);
            }
        }
    };
    return id;
}

NodeId Tape::gelu(NodeId x) {
    const Matrix& xv = value(x);
    Matrix out(xv.rows(), xv.cols());
    for (std::size_t i = 0; i < xv.size(); ++i) {
        out.data()[i] = xv.data()[i] * gauss_cdf(xv.data()[i]);
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id](Tape& t) {
        const Matrix& go = t.grad(id);
        const Matrix& xv = t.value(x);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < go.size(); ++i) {
            const double v = xv.data()[i];
            gx.data()[i] += go.data()[i] * (gauss_cdf(v) + v * gauss_pdf(v));
        }
    };
    return id;
}

NodeId Tape::slice_cols(NodeId x, std::size_t begin, std::size_t end) {
    const Matrix& xv = value(x);
    if (begin >= end || end > xv.cols()) throw ShapeError("tape slice_cols: bad range");
    Matrix out(xv.rows(), end - begin);
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        for (std::size_t j = begin; j < end; ++j) out(i, j - begin) = xv(i, j);
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id, begin](Tape& t) {
        const Matrix& go = t.grad(id);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < go.rows(); ++i) {
            for (std::size_t j = 0; j < go.cols(); ++j) gx(i, begin + j) += go(i, j);
        }
    };
    return id;
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("tape concat_cols: no inputs");
    const std::size_t rows = value(parts[0]).rows();
    std::size_t cols = 0;
    for (NodeId p : parts) {
        if (value(p).rows() != rows) throw ShapeError("tape concat_cols: row mismatch");
        cols += value(p).cols();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (NodeId p : parts) {
        const Matrix& pv = value(p);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < pv.cols(); ++j) out(i, offset + j) = pv(i, j);
        }
        offset += pv.cols();
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [parts, id](Tape& t) {
        const Matrix& go = t.grad(id);
        std::size_t offset = 0;
        for (NodeId p : parts) {
            Matrix& gp = t.grad_mut(p);
            for (std::size_t i = 0; i < gp.rows(); ++i) {
                for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += go(i, offset + j);
            }
            offset += gp.cols();
        }
    };
    return id;
}

NodeId Tape::concat_rows(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ShapeError("tape concat_rows: no inputs");
    const std::size_t cols = value(parts[0]).cols();
    std::size_t rows = 0;
    for (NodeId p : parts) {
        if (value(p).cols() != cols) throw ShapeError("tape concat_rows: column mismatch");
        rows += value(p).rows();
    }
    Matrix out(rows, cols);
    std::size_t offset = 0;
    for (NodeId p : parts) {
        const Matrix& pv = value(p);
        for (std::size_t i = 0; i < pv.rows(); ++i) {
            for (std::size_t j = 0; j < cols; ++j) out(offset + i, j) = pv(i, j);
        }
        offset += pv.rows();
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [parts, id](Tape& t) {
        const Matrix& go = t.grad(id);
        std::size_t offset = 0;
        for (NodeId p : parts) {
            Matrix& gp = t.grad_mut(p);
            for (std::size_t i = 0; i < gp.rows(); ++i) {
                for (std::size_t j = 0; j < gp.cols(); ++j) gp(i, j) += go(offset + i, j);
            }
            offset += gp.rows();
        }
    };
    return id;
}

NodeId Tape::mean_rows(NodeId x) {
    const Matrix& xv = value(x);
    if (xv.rows() == 0) throw ShapeError("tape mean_rows: empty input");
    Matrix out(1, xv.cols());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        for (std::size_t j = 0; j < xv.cols(); ++j) out(0, j) += xv(i, j);
    }
    scale_in_place(out, 1.0 / static_cast<double>(xv.rows()));
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id](Tape& t) {
        const Matrix& go = t.grad(id);
        Matrix& gx = t.grad_mut(x);
        const double inv = 1.0 / static_cast<double>(gx.rows());
        for (std::size_t i = 0; i < gx.rows(); ++i) {
            for (std::size_t j = 0; j < gx.cols(); ++j) gx(i, j) += go(0, j) * inv;
        }
    };
    return id;
}

NodeId Tape::l2_normalize_rows(NodeId x) {
    const Matrix& xv = value(x);
    Matrix out(xv.rows(), xv.cols());
    std::vector<double> norms(xv.rows());
    for (std::size_t i = 0; i < xv.rows(); ++i) {
        double sq = 0.0;
        for (std::size_t j = 0; j < xv.cols(); ++j) sq += xv(i, j) * xv(i, j);
        norms[i] = std::max(std::sqrt(sq), kNormFloor);
        for (std::size_t j = 0; j < xv.cols(); ++j) out(i, j) = xv(i, j) / norms[i];
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id, norms = std::move(norms)](Tape& t) {
        const Matrix& go = t.grad(id);
        const Matrix& y = t.value(id);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < go.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < go.cols(); ++j) dot += go(i, j) * y(i, j);
            for (std::size_t j = 0; j < go.cols(); ++j) {
                gx(i, j) += (go(i, j) - dot * y(i, j)) / norms[i];
            }
        }
    };
    return id;
}

NodeId Tape::sum_all(NodeId x) {
    const Matrix& xv = value(x);
    Matrix out(1, 1);
    for (std::size_t i = 0; i < xv.size(); ++i) out(0, 0) += xv.data()[i];
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [x, id](Tape& t) {
        const double go = t.grad(id)(0, 0);
        Matrix& gx = t.grad_mut(x);
        for (std::size_t i = 0; i < gx.size(); ++i) gx.data()[i] += go;
    };
    return id;
}

NodeId Tape::add_scalars(const std::vector<NodeId>& scalars) {
    if (scalars.empty()) throw ShapeError("tape add_scalars: no inputs");
    Matrix out(1, 1);
    for (NodeId s : scalars) {
        if (value(s).rows() != 1 || value(s).cols() != 1) {
            throw ShapeError("tape add_scalars: inputs must be scalars");
        }
        out(0, 0) += value(s)(0, 0);
    }
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [scalars, id](Tape& t) {
        const double go = t.grad(id)(0, 0);
        for (NodeId s : scalars) t.grad_mut(s)(0, 0) += go;
    };
    return id;
}

NodeId Tape::masked_scaled_sq_error(NodeId pred, const Matrix& target_norm,
                                    const Matrix& mask, double mean, double inv_std) {
    const Matrix& pv = value(pred);
    if (!pv.same_shape(target_norm) || !pv.same_shape(mask)) {
        throw ShapeError("tape masked_scaled_sq_error: shapes disagree");
    }
    Matrix residual(pv.rows(), pv.cols());
    double acc = 0.0;
    for (std::size_t i = 0; i < pv.size(); ++i) {
        if (mask.data()[i] != 0.0) {
            const double r = (pv.data()[i] - mean) * inv_std - target_norm.data()[i];
            residual.data()[i] = r;
            acc += r * r;
        }
    }
    Matrix out(1, 1, acc);
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [pred, id, inv_std, residual = std::move(residual)](Tape& t) {
        const double go = t.grad(id)(0, 0);
        Matrix& gp = t.grad_mut(pred);
        for (std::size_t i = 0; i < gp.size(); ++i) {
            gp.data()[i] += go * 2.0 * residual.data()[i] * inv_std;
        }
    };
    return id;
}

NodeId Tape::nt_xent_from_logits(NodeId logits) {
    const Matrix& s = value(logits);
    const std::size_t n = s.rows();
    if (n != s.cols() || n < 4 || n % 2 != 0) {
        throw ShapeError("tape nt_xent_from_logits: expected square [2B x 2B], B >= 2");
    }
    const std::size_t half = n / 2;

    // Row-wise softmax over k != i.
    Matrix probs(n, n);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double mx = -1e300;
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) mx = std::max(mx, s(i, k));
        }
        double sum = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) {
                probs(i, k) = std::exp(s(i, k) - mx);
                sum += probs(i, k);
            }
        }
        for (std::size_t k = 0; k < n; ++k) {
            if (k != i) probs(i, k) /= sum;
        }
        const std::size_t pair = (i + half) % n;
        loss += mx + std::log(sum) - s(i, pair);
    }
    loss /= static_cast<double>(n);

    Matrix out(1, 1, loss);
    NodeId id = push(std::move(out), {});
    nodes_[id].backprop = [logits, id, probs = std::move(probs), n, half](Tape& t) {
        const double go = t.grad(id)(0, 0) / static_cast<double>(n);
        Matrix& gs = t.grad_mut(logits);
        for (std::size_t i = 0; i < n; ++i) {
            const std::size_t pair = (i + half) % n;
            for (std::size_t k = 0; k < n; ++k) {
                if (k == i) continue;
                gs(i, k) += go * (probs(i, k) - (k == pair ? 1.0 : 0.0));
            }
        }
    };
    return id;
}

void Tape::backward(NodeId loss) {
    if (value(loss).rows() != 1 || value(loss).cols() != 1) {
        throw ShapeError("backward expects a scalar loss node");
    }
    grad_mut(loss)(0, 0) = 1.0;
    for (std::size_t i = nodes_.size(); i-- > 0;) {
        if (nodes_[i].backprop) nodes_[i].backprop(*this);
    }
}

}  // namespace weightspace::ad

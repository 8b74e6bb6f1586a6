#include <doctest.h>

#include <cmath>
#include <functional>

#include "weightspace/autodiff.hpp"
#include "weightspace/rng.hpp"

using namespace weightspace;
using ad::NodeId;
using ad::Tape;

namespace {

Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
    Matrix m(rows, cols);
    for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = rng.normal();
    return m;
}

// Checks grad of sum(weights .* f(inputs)) against central differences for
// every entry of every input.
void check_gradients(const std::vector<Matrix>& inputs,
                     const std::function<NodeId(Tape&, const std::vector<NodeId>&)>& build,
                     double tolerance = 1e-6) {
    Rng rng(777);

    auto loss_of = [&](const std::vector<Matrix>& values, Matrix* weights_out,
                       std::vector<Matrix>* grads_out) {
        Tape tape;
        std::vector<NodeId> ids;
        for (const auto& v : values) ids.push_back(tape.leaf(v));
        const NodeId out = build(tape, ids);

        Matrix weights = weights_out != nullptr && !weights_out->empty()
                             ? *weights_out
                             : random_matrix(rng, tape.value(out).rows(),
                                             tape.value(out).cols());
        if (weights_out != nullptr && weights_out->empty()) *weights_out = weights;
        const NodeId loss = tape.sum_all(tape.hadamard_const(out, weights));
        if (grads_out != nullptr) {
            tape.backward(loss);
            grads_out->clear();
            for (NodeId id : ids) grads_out->push_back(tape.grad(id));
        }
        return tape.value(loss)(0, 0);
    };

    Matrix weights;
    std::vector<Matrix> analytic;
    loss_of(inputs, &weights, &analytic);

    const double eps = 1e-6;
    for (std::size_t which = 0; which < inputs.size(); ++which) {
        for (std::size_t i = 0; i < inputs[which].size(); ++i) {
            std::vector<Matrix> probe = inputs;
            probe[which].data()[i] += eps;
            const double up = loss_of(probe, &weights, nullptr);
            probe[which].data()[i] -= 2 * eps;
            const double down = loss_of(probe, &weights, nullptr);
            const double numeric = (up - down) / (2 * eps);
            const double exact = analytic[which].data()[i];
            CHECK(std::abs(numeric - exact) <=
                  tolerance * std::max({std::abs(numeric), std::abs(exact), 1.0}));
        }
    }
}

}  // namespace

TEST_SUITE_BEGIN("autodiff");

TEST_CASE("matmul gradients") {
    Rng rng(1);
    check_gradients({random_matrix(rng, 3, 4), random_matrix(rng, 4, 2)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.matmul(in[0], in[1]);
                    });
    check_gradients({random_matrix(rng, 3, 4), random_matrix(rng, 5, 4)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.matmul_nt(in[0], in[1]);
                    });
}

TEST_CASE("elementwise and broadcast gradients") {
    Rng rng(2);
    check_gradients({random_matrix(rng, 3, 5), random_matrix(rng, 3, 5)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.add(in[0], in[1]);
                    });
    check_gradients({random_matrix(rng, 4, 3), random_matrix(rng, 1, 3)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.add_row_broadcast(in[0], in[1]);
                    });
    check_gradients({random_matrix(rng, 2, 6)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.scale(in[0], -2.5);
                    });
    check_gradients({random_matrix(rng, 3, 3)},
                    [](Tape& t, const std::vector<NodeId>& in) { return t.gelu(in[0]); });
}

TEST_CASE("softmax, layer norm and l2 normalization gradients") {
    Rng rng(3);
    check_gradients({random_matrix(rng, 4, 5)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.softmax_rows(in[0]);
                    });
    check_gradients({random_matrix(rng, 3, 6), random_matrix(rng, 1, 6),
                     random_matrix(rng, 1, 6)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.layer_norm(in[0], in[1], in[2]);
                    },
                    1e-5);
    check_gradients({random_matrix(rng, 4, 4)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.l2_normalize_rows(in[0]);
                    });
}

TEST_CASE("shape plumbing gradients") {
    Rng rng(4);
    check_gradients({random_matrix(rng, 3, 8)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.slice_cols(in[0], 2, 6);
                    });
    check_gradients({random_matrix(rng, 3, 2), random_matrix(rng, 3, 4)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.concat_cols({in[0], in[1]});
                    });
    check_gradients({random_matrix(rng, 2, 5), random_matrix(rng, 3, 5)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.concat_rows({in[0], in[1]});
                    });
    check_gradients({random_matrix(rng, 6, 3)},
                    [](Tape& t, const std::vector<NodeId>& in) {
                        return t.mean_rows(in[0]);
                    });
}

TEST_CASE("loss node gradients") {
    Rng rng(5);

    SUBCASE("masked scaled squared error") {
        Matrix target = random_matrix(rng, 3, 4);
        Matrix mask(3, 4);
        for (std::size_t i = 0; i < mask.size(); ++i) {
            mask.data()[i] = rng.bernoulli(0.7) ? 1.0 : 0.0;
        }
        mask(0, 0) = 1.0;
        check_gradients({random_matrix(rng, 3, 4)},
                        [&](Tape& t, const std::vector<NodeId>& in) {
                            return t.masked_scaled_sq_error(in[0], target, mask, 0.3, 1.7);
                        });
    }

    SUBCASE("nt-xent over logits") {
        check_gradients({random_matrix(rng, 6, 6)},
                        [](Tape& t, const std::vector<NodeId>& in) {
                            return t.nt_xent_from_logits(in[0]);
                        });
    }

    SUBCASE("full contrastive chain") {
        check_gradients({random_matrix(rng, 3, 5), random_matrix(rng, 3, 5)},
                        [](Tape& t, const std::vector<NodeId>& in) {
                            const NodeId z = t.concat_rows({in[0], in[1]});
                            const NodeId n = t.l2_normalize_rows(z);
                            return t.nt_xent_from_logits(t.scale(t.matmul_nt(n, n), 2.0));
                        },
                        1e-5);
    }
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix(2, 2, 1.0));
    CHECK_THROWS_AS(tape.backward(x), ShapeError);
}

TEST_SUITE_END();

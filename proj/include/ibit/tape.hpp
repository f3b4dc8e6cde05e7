#ifndef IBIT_TAPE_HPP_
#define IBIT_TAPE_HPP_

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "ibit/matrix.hpp"

namespace ibit {

enum class Precision { f64, f32 };

class Tape;

// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
  public:
    Var() = default;
    Var(Tape *tape, std::size_t id) : tape_(tape), id_(id) {}

    const Matrix &value() const;
    const Matrix &grad() const;
    std::size_t id() const noexcept { return id_; }
    Tape &tape() const noexcept { return *tape_; }
    bool valid() const noexcept { return tape_ != nullptr; }

  private:
    Tape *tape_ = nullptr;
    std::size_t id_ = 0;
};

// Receives the node's output gradient and fills one slot per parent. Slots
// left empty contribute nothing.
using BackwardFn = std::function<void(const Matrix &grad_out, std::vector<Matrix> &parent_grads)>;

// Linear record of primitive operations for exact reverse-mode gradients of a
// scalar. Single-threaded. In f32 mode every recorded value is rounded to
// single precision on entry, emulating 32-bit storage.
class Tape {
  public:
    explicit Tape(Precision precision = Precision::f64) : precision_(precision) {}
    Tape(const Tape &) = delete;
    Tape &operator=(const Tape &) = delete;

    Var constant(Matrix value) { return push(std::move(value), {}, nullptr, false); }
    Var parameter(Matrix value) { return push(std::move(value), {}, nullptr, true); }
    Var record(Matrix value, std::vector<Var> parents, BackwardFn backward);

    // Seeds d(loss)/d(loss) = 1; loss must be 1x1.
    void backward(Var loss);

    const Matrix &value(std::size_t id) const { return nodes_.at(id).value; }
    const Matrix &grad(std::size_t id) const;
    bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
    std::size_t size() const noexcept { return nodes_.size(); }
    Precision precision() const noexcept { return precision_; }

  private:
    struct Node {
        Matrix value;
        Matrix grad;
        std::vector<std::size_t> parents;
        BackwardFn backward;
        bool requires_grad = false;
    };

    Var push(Matrix value, std::vector<std::size_t> parents, BackwardFn backward, bool requires_grad);

    std::deque<Node> nodes_; // backward closures hold references into values; must not relocate
    Precision precision_;
    bool backward_done_ = false;
};

// Differentiable primitives. All operands must live on the same tape.
namespace ad {

Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b); // a * b^T
Var matmul_tn(Var a, Var b); // a^T * b
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var scale(Var a, double s);
// x (n x d) + bias (1 x d) broadcast over rows
Var add_row_bias(Var x, Var bias);
// row r of x multiplied by factors[r / rows_per_group]
Var scale_row_groups(Var x, std::vector<double> factors, std::size_t rows_per_group);
Var gelu(Var x);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
Var gather_rows(Var x, std::vector<std::size_t> rows);
Var sum(Var x);
Var mse(Var x, const Matrix &target);
// Mean over rows of cross entropy against (1-s)*onehot + s/K targets.
Var cross_entropy(Var logits, std::span<const int> labels, double smoothing);

} // namespace ad

double gelu_value(double x);

} // namespace ibit

#endif // IBIT_TAPE_HPP_

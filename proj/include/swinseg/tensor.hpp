#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace swinseg {

enum class DType : uint8_t { f32, f64 };

inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }
inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
DType dtype_from_name(const std::string& name);

/// Thrown when a computation produces or receives non-finite values.
/// The CLI maps this to exit code 2.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

std::string shape_str(const std::vector<int64_t>& shape);
int64_t shape_numel(const std::vector<int64_t>& shape);

// vector storage that skips value-initialization on resize; ops that
// overwrite every element use it to avoid a redundant zero pass
template <class T>
struct RawAllocator : std::allocator<T> {
    template <class U>
    struct rebind {
        using other = RawAllocator<U>;
    };
    template <class U>
    constexpr void construct(U*) noexcept {}
    template <class U, class... Args>
    void construct(U* p, Args&&... args) {
        ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
    }
};
using ByteBuffer = std::vector<std::byte, RawAllocator<std::byte>>;

/// Calls f(float{}) or f(double{}) depending on dt.
template <class F>
decltype(auto) dispatch(DType dt, F&& f) {
    if (dt == DType::f32) return f(float{});
    return f(double{});
}

struct TensorImpl {
    std::vector<int64_t> shape;
    DType dtype = DType::f32;
    ByteBuffer data;
    ByteBuffer grad;  // empty until first accumulation
    bool requires_grad = false;   // leaf flag, set by the user
    bool needs_grad = false;      // requires_grad or derived from such inputs

    int64_t numel() const { return shape_numel(shape); }
    template <class T>
    T* values() { return reinterpret_cast<T*>(data.data()); }
    template <class T>
    const T* values() const { return reinterpret_cast<const T*>(data.data()); }
    template <class T>
    T* grad_values() { return reinterpret_cast<T*>(grad.data()); }
    bool has_grad() const { return !grad.empty(); }
    void ensure_grad();  // allocate + zero-fill
};

/// Dense n-d array with row-major contiguous storage. Value-semantic handle;
/// copies share the payload. Participates in the active Tape when grad mode
/// is on and the tensor (or an ancestor) requires gradients.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<int64_t> shape, DType dt);  // zero-filled
    explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

    static Tensor zeros(std::vector<int64_t> shape, DType dt = DType::f32);
    /// Allocates without clearing; caller must write every element.
    static Tensor uninit(std::vector<int64_t> shape, DType dt = DType::f32);
    static Tensor full(std::vector<int64_t> shape, double value, DType dt = DType::f32);
    static Tensor ones(std::vector<int64_t> shape, DType dt = DType::f32) {
        return full(std::move(shape), 1.0, dt);
    }
    static Tensor scalar(double value, DType dt = DType::f32) { return full({}, value, dt); }
    static Tensor from_f32(std::vector<int64_t> shape, std::vector<float> values);
    static Tensor from_f64(std::vector<int64_t> shape, std::vector<double> values);
    static Tensor rand_uniform(std::vector<int64_t> shape, double lo, double hi,
                               std::mt19937_64& rng, DType dt = DType::f32);
    static Tensor rand_normal(std::vector<int64_t> shape, double mean, double stddev,
                              std::mt19937_64& rng, DType dt = DType::f32);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int64_t>& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int64_t extent(int axis) const;  // negative axis counts from the back
    int64_t numel() const { return impl_->numel(); }
    DType dtype() const { return impl_->dtype; }

    template <class T>
    T* data() { return impl_->values<T>(); }
    template <class T>
    const T* data() const { return impl_->values<T>(); }

    /// Element access as double regardless of dtype (test/debug convenience).
    double at(int64_t flat) const;
    double at(std::initializer_list<int64_t> idx) const;
    void set(int64_t flat, double v);
    double item() const;  // rank-0 or single-element tensors only

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v);
    bool needs_grad() const { return impl_->needs_grad; }
    /// Copy of the accumulated gradient (undefined Tensor if none).
    Tensor grad() const;
    void zero_grad() { impl_->grad.clear(); }

    Tensor clone() const;
    Tensor astype(DType dt) const;
    Tensor detach() const;  // shares data, drops grad tracking

    bool all_finite() const;
    bool same_bits(const Tensor& other) const;

    const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

private:
    std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of executed operations. Backward runs the recorded rules in
/// exact reverse execution order; gradients accumulate additively on fan-out.
class Tape {
public:
    static Tape& active();

    void record(std::function<void()> backward_fn);
    /// Seeds d(loss)/d(loss) = 1 and runs all rules in reverse. A second
    /// backward without reset() is an error.
    void backward(const Tensor& loss);
    void reset();
    size_t size() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
    bool consumed_ = false;
};

bool grad_enabled();

/// RAII guard: ops executed in scope are not recorded on the tape.
struct NoGrad {
    NoGrad();
    ~NoGrad();
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;

private:
    bool prev_;
};

/// When on, every op validates output finiteness and throws NumericError on
/// NaN/Inf. Defaults to on in debug builds, off in release.
void set_finite_checks(bool on);
bool finite_checks();
void check_finite(const Tensor& t, const char* op_name);

/// Deterministic stream derivation: mixes (seed, parts...) into one rng seed.
uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> parts);
std::mt19937_64 derived_rng(uint64_t seed, std::initializer_list<uint64_t> parts);

}  // namespace swinseg

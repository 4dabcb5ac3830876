#include "swinseg/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

extern "C" void openblas_set_num_threads(int);

namespace swinseg {

namespace {
// Parallelism is ours (OpenMP over slabs/batches); a single-threaded BLAS
// keeps GEMM calls deterministic and avoids pool contention.
const bool g_blas_init = [] {
    openblas_set_num_threads(1);
    return true;
}();
bool g_grad_enabled = true;
#ifdef NDEBUG
bool g_finite_checks = false;
#else
bool g_finite_checks = true;
#endif
}  // namespace

DType dtype_from_name(const std::string& name) {
    if (name == "f32") return DType::f32;
    if (name == "f64") return DType::f64;
    throw std::invalid_argument("unknown dtype: " + name);
}

std::string shape_str(const std::vector<int64_t>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (int64_t e : shape) n *= e;
    return n;
}

void TensorImpl::ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), std::byte{0});
}

Tensor::Tensor(std::vector<int64_t> shape, DType dt) {
    for (int64_t e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
    impl_ = std::make_shared<TensorImpl>();
    impl_->shape = std::move(shape);
    impl_->dtype = dt;
    impl_->data.resize(static_cast<size_t>(impl_->numel()) * dtype_size(dt));
    std::memset(impl_->data.data(), 0, impl_->data.size());
}

Tensor Tensor::zeros(std::vector<int64_t> shape, DType dt) { return Tensor(std::move(shape), dt); }

Tensor Tensor::uninit(std::vector<int64_t> shape, DType dt) {
    for (int64_t e : shape) {
        if (e <= 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
    Tensor t;
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->dtype = dt;
    impl->data.resize(static_cast<size_t>(impl->numel()) * dtype_size(dt));
    return Tensor(std::move(impl));
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, DType dt) {
    Tensor t(std::move(shape), dt);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        std::fill_n(p, t.numel(), static_cast<T>(value));
    });
    return t;
}

Tensor Tensor::from_f32(std::vector<int64_t> shape, std::vector<float> values) {
    Tensor t(std::move(shape), DType::f32);
    if (static_cast<int64_t>(values.size()) != t.numel())
        throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(t.shape()));
    std::memcpy(t.impl()->data.data(), values.data(), values.size() * sizeof(float));
    return t;
}

Tensor Tensor::from_f64(std::vector<int64_t> shape, std::vector<double> values) {
    Tensor t(std::move(shape), DType::f64);
    if (static_cast<int64_t>(values.size()) != t.numel())
        throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                    " does not match shape " + shape_str(t.shape()));
    std::memcpy(t.impl()->data.data(), values.data(), values.size() * sizeof(double));
    return t;
}

Tensor Tensor::rand_uniform(std::vector<int64_t> shape, double lo, double hi,
                            std::mt19937_64& rng, DType dt) {
    Tensor t(std::move(shape), dt);
    std::uniform_real_distribution<double> dist(lo, hi);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(dist(rng));
    });
    return t;
}

Tensor Tensor::rand_normal(std::vector<int64_t> shape, double mean, double stddev,
                           std::mt19937_64& rng, DType dt) {
    Tensor t(std::move(shape), dt);
    std::normal_distribution<double> dist(mean, stddev);
    dispatch(dt, [&](auto tag) {
        using T = decltype(tag);
        T* p = t.data<T>();
        for (int64_t i = 0; i < t.numel(); ++i) p[i] = static_cast<T>(dist(rng));
    });
    return t;
}

int64_t Tensor::extent(int axis) const {
    int r = rank();
    if (axis < 0) axis += r;
    if (axis < 0 || axis >= r)
        throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                    shape_str(shape()));
    return impl_->shape[axis];
}

double Tensor::at(int64_t flat) const {
    return dispatch(dtype(), [&](auto tag) -> double {
        using T = decltype(tag);
        return static_cast<double>(impl_->values<T>()[flat]);
    });
}

double Tensor::at(std::initializer_list<int64_t> idx) const {
    if (static_cast<int>(idx.size()) != rank())
        throw std::invalid_argument("index rank mismatch for shape " + shape_str(shape()));
    int64_t flat = 0;
    int axis = 0;
    for (int64_t i : idx) flat = flat * impl_->shape[axis] + i, ++axis;
    return at(flat);
}

void Tensor::set(int64_t flat, double v) {
    dispatch(dtype(), [&](auto tag) {
        using T = decltype(tag);
        impl_->values<T>()[flat] = static_cast<T>(v);
    });
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("item() requires a single-element tensor, got shape " +
                                    shape_str(shape()));
    return at(int64_t{0});
}

Tensor& Tensor::set_requires_grad(bool v) {
    impl_->requires_grad = v;
    impl_->needs_grad = v;
    return *this;
}

Tensor Tensor::grad() const {
    if (!impl_->has_grad()) return Tensor();
    Tensor g = Tensor::uninit(impl_->shape, impl_->dtype);
    std::memcpy(g.impl()->data.data(), impl_->grad.data(), impl_->grad.size());
    return g;
}

Tensor Tensor::clone() const {
    Tensor t = Tensor::uninit(impl_->shape, impl_->dtype);
    t.impl()->data = impl_->data;
    return t;
}

Tensor Tensor::astype(DType dt) const {
    if (dt == dtype()) return clone();
    Tensor t = Tensor::uninit(impl_->shape, dt);
    const int64_t n = numel();
    if (dtype() == DType::f32) {
        const float* src = data<float>();
        double* dst = t.data<double>();
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<double>(src[i]);
    } else {
        const double* src = data<double>();
        float* dst = t.data<float>();
        for (int64_t i = 0; i < n; ++i) dst[i] = static_cast<float>(src[i]);
    }
    return t;
}

Tensor Tensor::detach() const {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->dtype = impl_->dtype;
    impl->data = impl_->data;
    return Tensor(std::move(impl));
}

bool Tensor::all_finite() const {
    return dispatch(dtype(), [&](auto tag) -> bool {
        using T = decltype(tag);
        const T* p = data<T>();
        for (int64_t i = 0; i < numel(); ++i)
            if (!std::isfinite(static_cast<double>(p[i]))) return false;
        return true;
    });
}

bool Tensor::same_bits(const Tensor& other) const {
    return dtype() == other.dtype() && shape() == other.shape() &&
           std::memcmp(impl_->data.data(), other.impl()->data.data(), impl_->data.size()) == 0;
}

Tape& Tape::active() {
    static Tape tape;
    return tape;
}

void Tape::record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (loss.numel() != 1)
        throw std::invalid_argument("backward requires a scalar root, got shape " +
                                    shape_str(loss.shape()));
    if (nodes_.empty()) throw std::runtime_error("backward on an empty tape");
    if (consumed_) throw std::runtime_error("backward called twice without tape reset");
    consumed_ = true;

    auto& root = *loss.impl();
    root.ensure_grad();
    dispatch(root.dtype, [&](auto tag) {
        using T = decltype(tag);
        root.grad_values<T>()[0] = static_cast<T>(1);
    });
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
}

void Tape::reset() {
    nodes_.clear();
    consumed_ = false;
}

bool grad_enabled() { return g_grad_enabled; }

NoGrad::NoGrad() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGrad::~NoGrad() { g_grad_enabled = prev_; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

void check_finite(const Tensor& t, const char* op_name) {
    if (!g_finite_checks) return;
    if (!t.all_finite())
        throw NumericError(std::string("non-finite values in output of ") + op_name);
}

uint64_t mix_seed(uint64_t seed, std::initializer_list<uint64_t> parts) {
    // splitmix64 over the concatenated words
    uint64_t h = seed + 0x9e3779b97f4a7c15ull;
    auto mix = [&h](uint64_t v) {
        h += v + 0x9e3779b97f4a7c15ull;
        uint64_t z = h;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        h = z ^ (z >> 31);
    };
    for (uint64_t p : parts) mix(p);
    return h;
}

std::mt19937_64 derived_rng(uint64_t seed, std::initializer_list<uint64_t> parts) {
    return std::mt19937_64(mix_seed(seed, parts));
}

}  // namespace swinseg

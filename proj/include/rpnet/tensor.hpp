#ifndef RPNET_TENSOR_HPP
#define RPNET_TENSOR_HPP

#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace rpnet {

/// Allocator pinning every buffer to a 64-byte boundary. Vectorized kernels
/// pick their load/peel pattern from the pointer alignment, so a fixed
/// alignment keeps floating-point summation order (and thus results)
/// bit-identical across allocations and runs.
template <typename T>
struct AlignedAlloc {
    using value_type = T;
    AlignedAlloc() = default;
    template <typename U>
    AlignedAlloc(const AlignedAlloc<U>&) {}
    T* allocate(std::size_t n) {
        if (n == 0) return nullptr;
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(64)));
    }
    void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(64)); }
    template <typename U>
    bool operator==(const AlignedAlloc<U>&) const {
        return true;
    }
};

using FloatVec = std::vector<float, AlignedAlloc<float>>;

/// Dense float tensor, row-major. Layouts used throughout: NCHW for
/// activations, (Cout, Cin, kh, kw) for convolution weights, {1} for scalars.
struct Tensor {
    std::vector<int> shape;
    FloatVec data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape), 0.f) {}
    Tensor(std::vector<int> s, FloatVec d) : shape(std::move(s)), data(std::move(d)) {
        if (data.size() != count(shape)) throw std::invalid_argument("tensor: data/shape mismatch");
    }

    static std::size_t count(const std::vector<int>& s) {
        std::size_t n = 1;
        for (int d : s) {
            if (d < 0) throw std::invalid_argument("tensor: negative dim");
            n *= static_cast<std::size_t>(d);
        }
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }
    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    std::size_t size() const { return data.size(); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i)); }
    int ndim() const { return static_cast<int>(shape.size()); }

    float& operator[](std::size_t i) { return data[i]; }
    float operator[](std::size_t i) const { return data[i]; }

    // NCHW accessors (n omitted for 3-d tensors)
    float& at(int n, int c, int h, int w) {
        return data[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
    }
    float at(int n, int c, int h, int w) const {
        return data[((static_cast<std::size_t>(n) * dim(1) + c) * dim(2) + h) * dim(3) + w];
    }
    float& at(int c, int h, int w) {
        return data[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
    }
    float at(int c, int h, int w) const {
        return data[(static_cast<std::size_t>(c) * dim(1) + h) * dim(2) + w];
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }
};

/// Integer class-index image with an ignore value outside [0, num_classes).
struct LabelImage {
    int height = 0;
    int width = 0;
    int num_classes = 0;
    int ignore_index = 255;
    std::vector<std::int32_t> data;  // row-major H*W

    LabelImage() = default;
    LabelImage(int h, int w, int classes, int ignore = 255)
        : height(h), width(w), num_classes(classes), ignore_index(ignore),
          data(static_cast<std::size_t>(h) * w, ignore) {}

    std::int32_t& at(int y, int x) { return data[static_cast<std::size_t>(y) * width + x]; }
    std::int32_t at(int y, int x) const { return data[static_cast<std::size_t>(y) * width + x]; }

    bool valid_value(std::int32_t v) const {
        return v == ignore_index || (v >= 0 && v < num_classes);
    }
    void validate() const {
        for (auto v : data)
            if (!valid_value(v)) throw std::invalid_argument("label: value out of range: " + std::to_string(v));
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string r = "(";
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + ")";
}

struct ShapeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct DivergenceError : std::runtime_error {
    int stage;
    long long iter;
    DivergenceError(const std::string& msg, int stage_, long long iter_)
        : std::runtime_error(msg), stage(stage_), iter(iter_) {}
};

}  // namespace rpnet

#endif

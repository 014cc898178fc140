#include "permweave/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace permweave {

Matrix::Matrix(std::size_t rows, std::size_t cols, float fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw NumericError("matrix data length " + std::to_string(data_.size()) +
                           " does not match " + std::to_string(rows) + "x" +
                           std::to_string(cols));
    }
}

Matrix Matrix::identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<float>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    std::vector<float> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
        if (row.size() != c) throw NumericError("ragged matrix literal");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Matrix(r, c, std::move(data));
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

std::string to_string(Activation kind) { return kind == Activation::relu ? "relu" : "gelu"; }

Activation parse_activation(const std::string& name) {
    if (name == "relu") return Activation::relu;
    if (name == "gelu") return Activation::gelu;
    throw std::invalid_argument("unknown activation '" + name + "'");
}

void require_finite(std::span<const float> values, const char* what) {
    for (float v : values) {
        if (!std::isfinite(v)) throw NumericError(std::string("non-finite value in ") + what);
    }
}

namespace {

constexpr std::size_t kTileRows = 4;
constexpr std::size_t kTileCols = 16;

// c[i0:i0+4, j0:j0+16] for full tiles; accumulators stay in registers.
void matmul_tile(const float* a, const float* b, float* c, std::size_t k, std::size_t n, std::size_t lda) {
    double acc[kTileRows][kTileCols] = {};
    for (std::size_t p = 0; p < k; ++p) {
        double bv[kTileCols];
        for (std::size_t j = 0; j < kTileCols; ++j) bv[j] = b[p * n + j];
        for (std::size_t r = 0; r < kTileRows; ++r) {
            const double ar = a[r * lda + p];
            for (std::size_t j = 0; j < kTileCols; ++j) acc[r][j] += ar * bv[j];
        }
    }
    for (std::size_t r = 0; r < kTileRows; ++r)
        for (std::size_t j = 0; j < kTileCols; ++j) c[r * n + j] = static_cast<float>(acc[r][j]);
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw NumericError("matmul dimension mismatch: " + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()));
    }
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Matrix c(m, n);
    const float* ap = a.values().data();
    const float* bp = b.values().data();
    float* cp = c.values().data();
    const std::size_t m_full = m - m % kTileRows, n_full = n - n % kTileCols;
    for (std::size_t i = 0; i < m_full; i += kTileRows)
        for (std::size_t j = 0; j < n_full; j += kTileCols)
            matmul_tile(ap + i * k, bp + j, cp + i * n + j, k, n, k);

    // Ragged edges: same ascending-k summation per element.
    auto edge = [&](std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1) {
        std::vector<double> acc(j1 - j0);
        for (std::size_t i = i0; i < i1; ++i) {
            std::fill(acc.begin(), acc.end(), 0.0);
            for (std::size_t p = 0; p < k; ++p) {
                const double aip = ap[i * k + p];
                const float* brow = bp + p * n;
                for (std::size_t j = j0; j < j1; ++j) acc[j - j0] += aip * static_cast<double>(brow[j]);
            }
            for (std::size_t j = j0; j < j1; ++j) cp[i * n + j] = static_cast<float>(acc[j - j0]);
        }
    };
    if (n_full < n) edge(0, m_full, n_full, n);
    if (m_full < m) edge(m_full, m, 0, n);
    require_finite(c, "matmul");
    return c;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw NumericError("matmul_bt dimension mismatch");
    return matmul(a, b.transposed());
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw NumericError("matmul_at dimension mismatch");
    return matmul(a.transposed(), b);
}

Matrix softmax_rows(const Matrix& a) {
    require_finite(a, "softmax input");
    Matrix out(a.rows(), a.cols());
    std::vector<double> e(a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        const auto in = a.row(r);
        if (in.empty()) continue;
        const float mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            e[c] = std::exp(static_cast<double>(in[c]) - mx);
            sum += e[c];
        }
        auto o = out.row(r);
        for (std::size_t c = 0; c < in.size(); ++c) o[c] = static_cast<float>(e[c] / sum);
    }
    return out;
}

std::vector<float> layer_norm(std::span<const float> x, std::span<const float> gamma,
                              std::span<const float> beta, float eps) {
    const std::size_t d = x.size();
    if (d == 0 || gamma.size() != d || beta.size() != d)
        throw NumericError("layer_norm shape mismatch");
    require_finite(x, "layer_norm input");
    double mean = 0.0;
    for (float v : x) mean += v;
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (float v : x) var += (v - mean) * (v - mean);
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + static_cast<double>(eps));
    std::vector<float> y(d);
    for (std::size_t i = 0; i < d; ++i)
        y[i] = static_cast<float>((x[i] - mean) * inv * gamma[i] + beta[i]);
    return y;
}

namespace {
constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
}  // namespace

float activate(float x, Activation kind) {
    if (kind == Activation::relu) return x > 0.0f ? x : 0.0f;
    const double v = x;
    return static_cast<float>(0.5 * v * (1.0 + std::tanh(kGeluScale * (v + kGeluCubic * v * v * v))));
}

float activate_grad(float x, Activation kind) {
    if (kind == Activation::relu) return x > 0.0f ? 1.0f : 0.0f;
    const double v = x;
    const double t = std::tanh(kGeluScale * (v + kGeluCubic * v * v * v));
    const double dt = (1.0 - t * t) * kGeluScale * (1.0 + 3.0 * kGeluCubic * v * v);
    return static_cast<float>(0.5 * (1.0 + t) + 0.5 * v * dt);
}

std::vector<float> activation(std::span<const float> x, Activation kind) {
    require_finite(x, "activation input");
    std::vector<float> y(x.size());
    std::transform(x.begin(), x.end(), y.begin(), [kind](float v) { return activate(v, kind); });
    return y;
}

}  // namespace permweave

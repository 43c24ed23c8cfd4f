#pragma once

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "binary_io.hpp"
#include "errors.hpp"

namespace dismesh {

struct Triplet {
    std::size_t row;
    std::size_t col;
    double value;
};

/// Immutable CSR matrix. Entries are kept in row-major sorted order with
/// duplicates merged, so iteration and serialization are deterministic.
class SparseMatrix {
public:
    SparseMatrix() = default;

    /// Duplicate (row, col) pairs are summed. Explicit zeros are kept.
    SparseMatrix(std::size_t rows, std::size_t cols, std::vector<Triplet> entries)
        : rows_(rows), cols_(cols) {
        for (const auto& t : entries) {
            if (t.row >= rows || t.col >= cols)
                throw ValidationError("sparse entry (" + std::to_string(t.row) + "," + std::to_string(t.col) +
                                      ") outside " + std::to_string(rows) + "x" + std::to_string(cols));
        }
        std::stable_sort(entries.begin(), entries.end(), [](const Triplet& a, const Triplet& b) {
            return std::tie(a.row, a.col) < std::tie(b.row, b.col);
        });
        row_ptr_.assign(rows + 1, 0);
        for (std::size_t i = 0; i < entries.size(); ++i) {
            if (!col_.empty() && i > 0 && entries[i].row == entries[i - 1].row && entries[i].col == entries[i - 1].col) {
                values_.back() += entries[i].value;
                continue;
            }
            col_.push_back(entries[i].col);
            values_.push_back(entries[i].value);
            ++row_ptr_[entries[i].row + 1];
        }
        for (std::size_t r = 0; r < rows; ++r) row_ptr_[r + 1] += row_ptr_[r];
    }

    static SparseMatrix identity(std::size_t n) {
        std::vector<Triplet> t;
        t.reserve(n);
        for (std::size_t i = 0; i < n; ++i) t.push_back({i, i, 1.0});
        return {n, n, std::move(t)};
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t nnz() const { return values_.size(); }

    std::span<const std::size_t> row_ptr() const { return row_ptr_; }
    std::span<const std::size_t> col_indices() const { return col_; }
    std::span<const double> values() const { return values_; }

    std::vector<Triplet> triplets() const {
        std::vector<Triplet> out;
        out.reserve(nnz());
        for (std::size_t r = 0; r < rows_; ++r)
            for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) out.push_back({r, col_[k], values_[k]});
        return out;
    }

    /// Value at (r, c), zero when absent.
    double coeff(std::size_t r, std::size_t c) const {
        auto first = col_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[r]);
        auto last = col_.begin() + static_cast<std::ptrdiff_t>(row_ptr_[r + 1]);
        auto it = std::lower_bound(first, last, c);
        if (it == last || *it != c) return 0.0;
        return values_[static_cast<std::size_t>(it - col_.begin())];
    }

    SparseMatrix transposed() const {
        std::vector<Triplet> t;
        t.reserve(nnz());
        for (const auto& e : triplets()) t.push_back({e.col, e.row, e.value});
        return {cols_, rows_, std::move(t)};
    }

    std::vector<double> to_dense() const {
        std::vector<double> d(rows_ * cols_, 0.0);
        for (const auto& e : triplets()) d[e.row * cols_ + e.col] = e.value;
        return d;
    }

    /// Little-endian: u64 rows, u64 cols, u64 nnz, then nnz x (u64 row, u64 col, f64 value).
    std::string serialize() const {
        std::string out;
        out.reserve(24 + nnz() * 24);
        io::put_u64(out, rows_);
        io::put_u64(out, cols_);
        io::put_u64(out, nnz());
        for (const auto& e : triplets()) {
            io::put_u64(out, e.row);
            io::put_u64(out, e.col);
            io::put_f64(out, e.value);
        }
        return out;
    }

    static SparseMatrix deserialize(std::string_view bytes) {
        io::Reader rd(bytes);
        const auto rows = rd.u64();
        const auto cols = rd.u64();
        const auto nnz = rd.u64();
        if (nnz > bytes.size() / 24) throw ValidationError("sparse matrix nnz exceeds payload size");
        std::vector<Triplet> t;
        t.reserve(nnz);
        for (std::uint64_t i = 0; i < nnz; ++i) {
            const auto r = rd.u64();
            const auto c = rd.u64();
            t.push_back({r, c, rd.f64()});
        }
        if (!rd.done()) throw ValidationError("trailing bytes after sparse matrix payload");
        return {rows, cols, std::move(t)};
    }

    friend bool operator==(const SparseMatrix& a, const SparseMatrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.row_ptr_ == b.row_ptr_ && a.col_ == b.col_ &&
               a.values_ == b.values_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<std::size_t> row_ptr_{0};
    std::vector<std::size_t> col_;
    std::vector<double> values_;
};

}  // namespace dismesh

// Shared small types: error categories, dense row-major matrix, number formatting.
//
// Licensed under the Apache License, Version 2.0

#pragma once

#include <charconv>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace asvc {

// Error categories map onto CLI exit codes: usage=1, data=2, numeric=3.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};
struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Dense row-major double matrix. Deliberately minimal: the autograd engine has
// its own node type; Mat is for plain data (features, scores, oracle math).
struct Mat {
    int rows = 0;
    int cols = 0;
    std::vector<double> v;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), v(static_cast<size_t>(r) * c, 0.0) {}

    double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
    double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
    const double* row(int r) const { return v.data() + static_cast<size_t>(r) * cols; }
    double* row(int r) { return v.data() + static_cast<size_t>(r) * cols; }
    size_t size() const { return v.size(); }
};

// Shortest round-trip formatting, locale-free. Used everywhere a double is
// written to a log/text artifact so same-seed runs are byte-identical.
inline std::string fmt_double(double x) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

inline std::string fmt_int(int64_t x) {
    char buf[24];
    auto res = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, res.ptr);
}

}  // namespace asvc

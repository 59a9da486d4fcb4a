#pragma once

#include <random>

#include <gtest/gtest.h>

#include "star/numkernel.hpp"

namespace star::testing {

inline Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0) {
    std::normal_distribution<double> g(0.0, stddev);
    Tensor t(std::move(shape));
    for (auto& v : t.storage()) v = g(rng);
    return t;
}

inline void expect_close(const Tensor& a, const Tensor& b, double tol) {
    ASSERT_EQ(a.shape(), b.shape());
    EXPECT_LE(max_abs_diff(a, b), tol);
}

} // namespace star::testing

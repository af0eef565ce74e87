#ifndef H2ML_KERNEL_HPP
#define H2ML_KERNEL_HPP

#include <functional>
#include <string>
#include <utility>

#include "h2ml/geometry.hpp"

namespace h2ml {

// symmetric kernel g(x,y) with its Gevrey index
struct KernelFunction {
    std::string name = "kernel";
    double delta = 1.0;
    double q = 0.0; // descriptive order parameter only
    std::function<double(const Point&, const Point&)> eval;

    double operator()(const Point& x, const Point& y) const { return eval(x, y); }
};

inline KernelFunction constant_kernel(double c = 1.0)
{
    return {"constant", 1.0, 0.0, [c](const Point&, const Point&) { return c; }};
}

} // namespace h2ml

#endif

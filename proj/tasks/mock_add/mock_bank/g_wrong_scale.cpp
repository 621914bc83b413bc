// KF-MOCK: compile=ok correct=0.6 time_ms=0.5 sync_ms=0.02 time_ms@lnl=0.45
#include <sycl/sycl.hpp>
#include <torch/extension.h>

torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    auto c = torch::empty_like(a);
    const float* pa = a.data_ptr<float>();
    const float* pb = b.data_ptr<float>();
    float* pc = c.data_ptr<float>();
    const size_t n = a.numel();
    sycl::queue q;
    // drops the 0.5 scale
    q.parallel_for(sycl::range<1>(n), [=](sycl::id<1> i) { pc[i] = sycl::fmax(pa[i] + pb[i], 0.f); }).wait();
    return c;
}

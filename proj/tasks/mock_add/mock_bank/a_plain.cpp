// KF-MOCK: compile=ok correct=1.0 time_ms=1.1 sync_ms=0.02 time_ms@lnl=0.95
#include <sycl/sycl.hpp>
#include <torch/extension.h>

torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    auto c = torch::empty_like(a);
    const float* pa = a.data_ptr<float>();
    const float* pb = b.data_ptr<float>();
    float* pc = c.data_ptr<float>();
    const size_t n = a.numel();
    sycl::queue q;
    q.parallel_for(sycl::range<1>(n), [=](sycl::id<1> i) {
        const float s = pa[i] + pb[i];
        pc[i] = (s > 0.f ? s : 0.f) * 0.5f;
    }).wait();
    return c;
}

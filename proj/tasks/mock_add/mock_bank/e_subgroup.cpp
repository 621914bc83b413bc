// KF-MOCK: compile=ok correct=1.0 time_ms=0.75 sync_ms=0.02 time_ms@lnl=1.05
#include <sycl/sycl.hpp>
#include <torch/extension.h>

torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    auto c = torch::empty_like(a);
    const float* pa = a.data_ptr<float>();
    const float* pb = b.data_ptr<float>();
    float* pc = c.data_ptr<float>();
    const size_t n = a.numel();
    const size_t global = (n + 255) / 256 * 256;
    sycl::queue q;
    q.parallel_for(sycl::nd_range<1>(global, 256), [=](sycl::nd_item<1> it) [[sycl::reqd_sub_group_size(16)]] {
        auto sg = it.get_sub_group();
        const size_t g = it.get_global_id(0);
        float s = g < n ? pa[g] + pb[g] : 0.f;
        // neighbours share the load through the sub-group instead of memory
        const float left = sycl::shift_group_left(sg, s, 0);
        if (g < n) pc[g] = (left > 0.f ? left : 0.f) * 0.5f;
    }).wait();
    return c;
}

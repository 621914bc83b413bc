// KF-MOCK: compile=ok correct=1.0 time_ms=0.8 sync_ms=0.02 time_ms@lnl=0.9
#include <sycl/sycl.hpp>
#include <torch/extension.h>

constexpr int TILE = 256;

torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    auto c = torch::empty_like(a);
    const float* pa = a.data_ptr<float>();
    const float* pb = b.data_ptr<float>();
    float* pc = c.data_ptr<float>();
    const size_t n = a.numel();
    const size_t global = (n + TILE - 1) / TILE * TILE;
    sycl::queue q;
    q.submit([&](sycl::handler& h) {
        sycl::local_accessor<float, 1> tile(sycl::range<1>(TILE), h);
        h.parallel_for(sycl::nd_range<1>(global, TILE), [=](sycl::nd_item<1> it) {
            const size_t g = it.get_global_id(0);
            const size_t l = it.get_local_id(0);
            tile[l] = g < n ? pa[g] + pb[g] : 0.f;
            sycl::group_barrier(it.get_group());
            if (g < n) pc[g] = (tile[l] > 0.f ? tile[l] : 0.f) * 0.5f;
        });
    }).wait();
    return c;
}

// KF-MOCK: compile=ok correct=1.0 time_ms=1.3 sync_ms=0.02 time_ms@lnl=1.2
#include <sycl/sycl.hpp>
#include <torch/extension.h>

torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    auto c = torch::empty_like(a);
    const float* pa = a.data_ptr<float>();
    const float* pb = b.data_ptr<float>();
    float* pc = c.data_ptr<float>();
    const size_t n = a.numel();
    sycl::queue q;
    unsigned* positives = sycl::malloc_device<unsigned>(1, q);
    q.parallel_for(sycl::range<1>(n), [=](sycl::id<1> i) {
        const float s = pa[i] + pb[i];
        pc[i] = (s > 0.f ? s : 0.f) * 0.5f;
        sycl::atomic_ref<unsigned, sycl::memory_order::relaxed, sycl::memory_scope::device> cnt(*positives);
        if (s > 0.f) cnt.fetch_add(1u);
    }).wait();
    sycl::free(positives, q);
    return c;
}

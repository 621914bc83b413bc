// KF-MOCK: compile=ok correct=1.0 time_ms=0.85 sync_ms=0.02 time_ms@lnl=0.65
#include <sycl/sycl.hpp>
#include <torch/extension.h>

static inline float relu_half(float s) { return sycl::fmax(s, 0.f) * 0.5f; }

torch::Tensor forward(torch::Tensor a, torch::Tensor b) {
    auto c = torch::empty_like(a);
    using vec4 = sycl::vec<float, 4>;
    const vec4* pa = reinterpret_cast<const vec4*>(a.data_ptr<float>());
    const vec4* pb = reinterpret_cast<const vec4*>(b.data_ptr<float>());
    vec4* pc = reinterpret_cast<vec4*>(c.data_ptr<float>());
    const size_t n4 = a.numel() / 4;
    sycl::queue q;
    q.parallel_for(sycl::range<1>(n4), [=](sycl::id<1> i) {
        const vec4 s = pa[i] + pb[i];
        pc[i] = vec4(relu_half(s[0]), relu_half(s[1]), relu_half(s[2]), relu_half(s[3]));
    }).wait();
    return c;
}

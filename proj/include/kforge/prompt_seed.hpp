#pragma once

// Seed text for the generation prompt: the fixed scaffold, the four evolvable
// regions, and the parameter-tuning request with its dispatch example.

namespace kforge::seed {

// clang-format off
inline constexpr const char* scaffold = R"TPL(You are a {{language}} programming expert specializing in GPU kernel optimization. Given a reference {{reference_language}} implementation, your objective is to create a performant kernel with identical functionality. The code you generate will be pasted into an existing project. Make sure to follow the existing code structure and function signatures. The {{language}} code you generate will be saved in {{kernel_file}} and {{load_instructions}}
{{#example}}

## Examples
Here is an example of a correct {{language}} kernel for a given {{reference_language}} reference:
```
{{example_reference}}
```
```{{fence}}
{{example_kernel}}
```
{{/example}}

## Reference code / Task
This is the reference {{reference_language}} implementation:
```
{{reference_code}}
```
{{#instructions}}
Additional instructions for this task:
{{instructions}}
{{/instructions}}
{{#top}}

## Top performing kernel
This is the best kernel tested so far (Runtime: {{top_runtime}}):
```{{fence}}
{{top_code}}
```
{{/top}}
{{#last}}

## Last tested kernel
Here is the last kernel we tested (Runtime: {{last_runtime}}):
```{{fence}}
{{last_code}}
```
Console output from running this kernel:
```
{{last_log}}
```
{{/last}}

## Hardware specification
Your code will run on the following hardware:
{{hardware}}
Please consider the hardware specifications when improving the code.

## Main Instructions
1. Provide a functional kernel that matches the reference implementation.
2. Use constructs to efficiently run the code on GPU.
3. Provide the complete code in a code block.
{{#template_mode}}

## Tunable parameters
You may turn hardware-dependent choices (work-group sizes, tile sizes, unroll factors) into template parameters. In that case write a `forward_templated` function templated on them and a `forward` function that takes one integer argument per template parameter and selects the instantiation with a chain of `if (a == 16 && b == 16) ... else if ...` branches, one branch per allowed combination.
{{/template_mode}}

## Optimization strategies
<!-- KF:REGION philosophy -->
{{region_philosophy}}
<!-- KF:END philosophy -->
<!-- KF:REGION strategies -->
{{region_strategies}}
{{#hints}}
Directions that recently improved kernels near the top one:
{{hints}}
{{/hints}}
<!-- KF:END strategies -->
<!-- KF:REGION pitfalls -->
{{region_pitfalls}}
<!-- KF:END pitfalls -->
<!-- KF:REGION analysis_guidance -->
{{region_analysis_guidance}}
<!-- KF:END analysis_guidance -->

## Critical Requirements
1. The kernel must exactly match the reference's functionality.
2. The code must compile and run properly on the GPU.
3. Do not cache or reuse previous results; ensure the code executes fully on each run.

## Response Format
Please structure your response as follows:
1. Analysis: Summarize the issues found in the previous kernel and log. Explain your proposed changes and optimizations.
2. Code: Provide the complete, improved {{language}} code in code blocks:
```
Your code here
```
If the kernel implements an asymptotically different algorithm than the reference, put the line `{{comment}} KF:ALGO=3 <one-line description>` in the code.
)TPL";

inline constexpr const char* philosophy = R"(- Prioritize memory bandwidth utilization before compute optimization.
- Reach a correct kernel first, then make it fast; never trade correctness for speed.
- Prefer one kernel launch that does all the work over several small launches.)";

inline constexpr const char* strategies = R"(Memory:
- Vectorize global loads and stores (`sycl::vec<float, 4>`, `float4`) so each work-item moves contiguous data.
- Stage reused tiles in local/shared memory and synchronize the work-group between load and use.
- Keep a small block of results in registers when each input element feeds several outputs.
Compute:
- Fuse elementwise epilogues (activation, scaling, bias) into the producing kernel.
- Use single-pass online formulations (running max and sum) for softmax-like reductions.
Parallelism:
- Reduce within a sub-group/warp with shuffle or group reduction primitives before touching shared memory.
- Size work-groups as a multiple of the sub-group width and cover the whole problem with a grid-stride loop.)";

inline constexpr const char* pitfalls = R"(- Avoid bank conflicts by adding padding to shared memory arrays.
- Do not place a barrier inside a branch that only some work-items take.
- Guard every global access against out-of-range indices when the problem size is not a multiple of the work-group size.
- Do not assume inputs are contiguous unless the task says so.)";

inline constexpr const char* analysis_guidance = R"(Before writing code:
1. Estimate whether the operation is memory-bound or compute-bound from its arithmetic intensity.
2. Identify which loads are reused and by how many work-items.
3. Read the last console output and name the concrete failure or bottleneck it shows.
4. Decide the one or two changes most likely to remove that bottleneck.)";

inline constexpr const char* template_request = R"TPL(You are a {{language}} programming expert specializing in GPU kernel optimization. Your task is to optimize a given {{language}} kernel.

## Given kernel
Here is the {{language}} kernel that we tested:
```{{fence}}
{{kernel_code}}
```

To optimize this kernel for specific hardware, please propose a templated kernel with some template parameters that can be tuned. To do so, you need to write an extension for PyTorch that implements a templated {{language}} kernel and a forward function for dispatching. Select suitable parameter options by adding them as dispatch-options in the forward function.

## Requirements
- The kernel should be templated on suitable parameters, e.g., block size, etc.
- The `forward_templated` function should launch the kernel with the given parameter values.
- The `forward` function should have standard arguments corresponding to the template parameters of `forward_templated`, and should select the correct instantiation based on the input values.
- The code must match the given kernel in functionality.
- The code should include a Pybind11 interface exposing `forward`.

Here is an example of a templated kernel in the correct format:
```cpp
{{dispatch_example}}
```
)TPL";

inline constexpr const char* dispatch_example = R"(#include <sycl/sycl.hpp>
#include <torch/extension.h>
#include <c10/xpu/XPUStream.h>

// Kernel name struct at namespace scope
template <int BX, int BY>
struct ElementwiseMulKernel {};

template <int BLOCK_X, int BLOCK_Y>
void elementwise_mul_sycl_kernel(
    torch::Tensor A,
    torch::Tensor B,
    torch::Tensor C,
    int N,
    int M
) {
    auto a_data = A.data_ptr<float>();
    auto b_data = B.data_ptr<float>();
    auto c_data = C.data_ptr<float>();

    sycl::queue& q = c10::xpu::getCurrentXPUStream().queue();

    sycl::range<2> global_range(
        ((N + BLOCK_Y - 1) / BLOCK_Y) * BLOCK_Y,
        ((M + BLOCK_X - 1) / BLOCK_X) * BLOCK_X
    );
    sycl::range<2> local_range(BLOCK_Y, BLOCK_X);

    q.submit([&](sycl::handler& cgh) {
        cgh.parallel_for<ElementwiseMulKernel<BLOCK_X, BLOCK_Y>>(
            sycl::nd_range<2>(global_range, local_range),
            [=](sycl::nd_item<2> item) {
                int row = item.get_global_id(0);
                int col = item.get_global_id(1);
                if (row < N && col < M) {
                    int idx = row * M + col;
                    c_data[idx] = a_data[idx] * b_data[idx];
                }
            }
        );
    }).wait();
}

// 2. Templated forward function
template <int BLOCK_X, int BLOCK_Y>
torch::Tensor forward_templated(torch::Tensor A, torch::Tensor B) {
    int N = A.size(0);
    int M = A.size(1);
    auto C = torch::empty({N, M}, A.options());
    elementwise_mul_sycl_kernel<BLOCK_X, BLOCK_Y>(A, B, C, N, M);
    return C;
}

// 3. Dispatcher - must have arguments corresponding to the template parameters of forward_templated
torch::Tensor forward(torch::Tensor A, torch::Tensor B, int block_x, int block_y) {
    TORCH_CHECK(A.scalar_type() == torch::kFloat, "Only float32 supported in this example");
    TORCH_CHECK(A.dim() == 2 && B.dim() == 2, "Only 2D tensors supported");
    TORCH_CHECK(A.sizes() == B.sizes(), "Input sizes must match");

    if (block_x == 16 && block_y == 16) {
        return forward_templated<16, 16>(A, B);
    } else if (block_x == 32 && block_y == 8) {
        return forward_templated<32, 8>(A, B);
    } else if (block_x == 8 && block_y == 32) {
        return forward_templated<8, 32>(A, B);
    } else {
        TORCH_CHECK(false, "Unsupported block size combination");
    }
}

// 4. Pybind11 interface
PYBIND11_MODULE(TORCH_EXTENSION_NAME, m) {
    m.def("forward", &forward, "Elementwise multiplication with block size dispatch");
})";

inline constexpr const char* meta_request = R"TPL(You maintain the guidance sections of a prompt that asks a code model to write fast, correct {{language}} GPU kernels.

Current guidance sections:
<!-- KF:REGION philosophy -->
{{region_philosophy}}
<!-- KF:END philosophy -->
<!-- KF:REGION strategies -->
{{region_strategies}}
<!-- KF:END strategies -->
<!-- KF:REGION pitfalls -->
{{region_pitfalls}}
<!-- KF:END pitfalls -->
<!-- KF:REGION analysis_guidance -->
{{region_analysis_guidance}}
<!-- KF:END analysis_guidance -->

Recent kernels produced with this guidance:
{{outcomes}}
Summary: {{summary}}

First diagnose which guidance was missing, misleading, or not specific enough for these outcomes. Then propose at most {{max_mutations}} edits. Each edit must change text inside exactly one section and use this format:
<<<<SEARCH region=<section name>
exact text currently in that section
====
replacement text
>>>>REPLACE
)TPL";
// clang-format on

} // namespace kforge::seed

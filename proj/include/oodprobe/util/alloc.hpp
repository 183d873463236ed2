#pragma once

namespace oodprobe {

/// Keeps large freed blocks in the heap instead of returning them to the OS, which
/// avoids page-fault churn from per-step activation buffers. No-op off glibc.
void tune_allocator();

}  // namespace oodprobe

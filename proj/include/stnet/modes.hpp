#pragma once

namespace stnet {

// How a forward pass treats stochastic layers and normalization statistics.
//   train:     dropout active, batch statistics used and folded into the
//              running estimates.
//   eval:      dropout off, running statistics only; fully deterministic.
//   gradcheck: dropout off, batch statistics used but never updated, so a
//              rebuilt graph is bit-identical — required for finite
//              differencing.
enum class RunMode { train, eval, gradcheck };

inline bool use_batch_stats(RunMode m) { return m != RunMode::eval; }
inline bool update_running_stats(RunMode m) { return m == RunMode::train; }

}  // namespace stnet

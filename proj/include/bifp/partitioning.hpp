#pragma once

#include <utility>
#include <vector>

#include "bifp/common.hpp"
#include "bifp/tensor.hpp"

namespace bifp {

// How one sample window is cut into past / present / future blocks.
struct PartitionSpec {
  int n_past = 2;
  int n_present = 4;
  int n_future = 2;
  int frames_per_block = 5;
  int max_stride = 3;

  int total_blocks() const { return n_past + n_present + n_future; }
  // number of past/future blocks available for joint pairs
  int pair_block_count() const { return std::min(n_past, n_future); }
  void validate() const;
};

// Concrete blocks for one sampled window. Blocks are [frames_per_block,H,W,C]
// tensors; frame_indices_* record which source frames each block consumed so
// ordering and disjointness are checkable after the fact.
struct BlockPartition {
  std::vector<Tensor> past_blocks;
  std::vector<Tensor> present_blocks;
  std::vector<Tensor> future_blocks;
  int source_stride = 1;
  int start_frame = 0;
  std::vector<std::vector<int>> frame_indices_past;
  std::vector<std::vector<int>> frame_indices_present;
  std::vector<std::vector<int>> frame_indices_future;
};

// frames: [T,H,W,C]. Samples a stride uniformly from the strides in
// {1..max_stride} that fit, a start offset uniformly over the remaining
// slack, then assigns the first n_past blocks to past, the middle n_present
// to present and the tail to future.
BlockPartition partition_clip(const Tensor& frames, const PartitionSpec& spec, Rng& rng);

// Uniform draw of one (past, future) block index pair.
std::pair<int, int> sample_pf_blocks(const BlockPartition& partition, Rng& rng);

}  // namespace bifp

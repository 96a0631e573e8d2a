#include "bifp/partitioning.hpp"

namespace bifp {

void PartitionSpec::validate() const {
  if (n_past < 0 || n_future < 0) fail("ConfigError", "negative block count");
  if (n_present < 1) fail("ConfigError", "n_present must be >= 1");
  if (frames_per_block < 1) fail("ConfigError", "frames_per_block must be >= 1");
  if (max_stride < 1) fail("ConfigError", "max_stride must be >= 1");
}

BlockPartition partition_clip(const Tensor& frames, const PartitionSpec& spec, Rng& rng) {
  spec.validate();
  if (frames.rank() != 4) fail("ShapeMismatch", "partition_clip: frames must be [T,H,W,C]");
  const int64_t T = frames.dim(0);
  const int64_t H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
  const int total_frames = spec.total_blocks() * spec.frames_per_block;

  // span at stride s: last consumed index is (total_frames-1)*s
  auto span = [&](int s) { return static_cast<int64_t>(total_frames - 1) * s + 1; };
  if (span(1) > T)
    fail("ClipTooShort", "clip has " + std::to_string(T) + " frames, needs " +
                             std::to_string(total_frames));

  int max_fit = 1;
  while (max_fit < spec.max_stride && span(max_fit + 1) <= T) ++max_fit;
  const int stride = static_cast<int>(rng.uniform_int(1, max_fit));
  const int64_t slack = T - span(stride);
  const int start = static_cast<int>(slack > 0 ? rng.uniform_int(0, slack) : 0);

  BlockPartition out;
  out.source_stride = stride;
  out.start_frame = start;

  const int64_t frame_size = H * W * C;
  auto cut_block = [&](int block) {
    Tensor blk({spec.frames_per_block, H, W, C});
    std::vector<int> idx(static_cast<size_t>(spec.frames_per_block));
    for (int f = 0; f < spec.frames_per_block; ++f) {
      const int src = start + (block * spec.frames_per_block + f) * stride;
      idx[static_cast<size_t>(f)] = src;
      std::copy_n(&frames.data[static_cast<size_t>(src * frame_size)], frame_size,
                  &blk.data[static_cast<size_t>(f) * static_cast<size_t>(frame_size)]);
    }
    return std::make_pair(std::move(blk), std::move(idx));
  };

  for (int b = 0; b < spec.total_blocks(); ++b) {
    auto [blk, idx] = cut_block(b);
    if (b < spec.n_past) {
      out.past_blocks.push_back(std::move(blk));
      out.frame_indices_past.push_back(std::move(idx));
    } else if (b < spec.n_past + spec.n_present) {
      out.present_blocks.push_back(std::move(blk));
      out.frame_indices_present.push_back(std::move(idx));
    } else {
      out.future_blocks.push_back(std::move(blk));
      out.frame_indices_future.push_back(std::move(idx));
    }
  }
  return out;
}

std::pair<int, int> sample_pf_blocks(const BlockPartition& partition, Rng& rng) {
  if (partition.past_blocks.empty() || partition.future_blocks.empty())
    fail("EmptyPartition", "sample_pf_blocks needs at least one past and one future block");
  const int p = static_cast<int>(
      rng.uniform_int(0, static_cast<int64_t>(partition.past_blocks.size()) - 1));
  const int f = static_cast<int>(
      rng.uniform_int(0, static_cast<int64_t>(partition.future_blocks.size()) - 1));
  return {p, f};
}

}  // namespace bifp

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "bifp/partitioning.hpp"

namespace bifp {

enum class AugmentMode { Consistent, Independent };
enum class AugmentOp { Crop, HFlip, ColorJitter, Sobel, Rot90 };

struct JitterStrength {
  double brightness = 0.25;
  double contrast = 0.25;
  double saturation = 0.25;
  double hue = 0.1;
};

struct AugmentPolicy {
  AugmentMode mode = AugmentMode::Independent;
  std::vector<AugmentOp> ops;           // applied in order
  std::vector<AugmentOp> pf_only_ops;   // subset of ops, skipped for present blocks
  int crop_size = 128;
  JitterStrength jitter;
  bool jitter_per_frame = true;  // per-frame during pretraining, per-clip for finetuning
  double sobel_prob = 0.5;

  bool has(AugmentOp op) const;
  bool pf_only(AugmentOp op) const;
  void validate() const;
};

// Per-partition record of what was sampled; used by tests and debug dumps.
struct AugmentTrace {
  struct PartitionParams {
    int crop_y = 0, crop_x = 0;
    bool flipped = false;
    int rot_k = 0;
    bool sobel_applied = false;
  };
  PartitionParams past, present, future;
};

// IncompatiblePolicy when spatial negatives are requested with independent
// augmentation; spatial negatives need cross-partition correspondence.
void check_policy_compatibility(const AugmentPolicy& policy, bool spatial_negatives);

BlockPartition augment_partition(const BlockPartition& partition, const AugmentPolicy& policy,
                                 Rng& rng, AugmentTrace* trace = nullptr);

// Deterministic evaluation-time transform: center crop only.
Tensor center_crop(const Tensor& frames, int crop_size);

// primitives (exposed for tests)
Tensor rot90_frames(const Tensor& block, int k);    // [T,H,W,C], CCW quarter turns
Tensor hflip_frames(const Tensor& block);
Tensor sobel_frames(const Tensor& block);           // gradient-magnitude per channel

AugmentOp augment_op_from_name(const std::string& name);
std::string augment_op_name(AugmentOp op);

}  // namespace bifp

#include "bifp/augmentation.hpp"

#include <algorithm>
#include <cmath>

namespace bifp {

bool AugmentPolicy::has(AugmentOp op) const {
  return std::find(ops.begin(), ops.end(), op) != ops.end();
}

bool AugmentPolicy::pf_only(AugmentOp op) const {
  return std::find(pf_only_ops.begin(), pf_only_ops.end(), op) != pf_only_ops.end();
}

void AugmentPolicy::validate() const {
  if (crop_size < 1) fail("ConfigError", "crop_size must be positive");
  if (sobel_prob < 0.0 || sobel_prob > 1.0) fail("ConfigError", "sobel_prob outside [0,1]");
  for (AugmentOp op : pf_only_ops)
    if (!has(op))
      fail("ConfigError", "pf_only op '" + augment_op_name(op) + "' not in ops list");
}

void check_policy_compatibility(const AugmentPolicy& policy, bool spatial_negatives) {
  policy.validate();
  if (spatial_negatives && policy.mode != AugmentMode::Consistent)
    fail("IncompatiblePolicy",
         "spatial negatives require consistent augmentation across partitions");
}

AugmentOp augment_op_from_name(const std::string& name) {
  if (name == "crop") return AugmentOp::Crop;
  if (name == "hflip") return AugmentOp::HFlip;
  if (name == "color_jitter") return AugmentOp::ColorJitter;
  if (name == "sobel") return AugmentOp::Sobel;
  if (name == "rot90") return AugmentOp::Rot90;
  fail("ConfigError", "unknown augmentation op '" + name + "'");
}

std::string augment_op_name(AugmentOp op) {
  switch (op) {
    case AugmentOp::Crop: return "crop";
    case AugmentOp::HFlip: return "hflip";
    case AugmentOp::ColorJitter: return "color_jitter";
    case AugmentOp::Sobel: return "sobel";
    case AugmentOp::Rot90: return "rot90";
  }
  return "?";
}

// ---------------- primitives ----------------

Tensor rot90_frames(const Tensor& block, int k) {
  k = ((k % 4) + 4) % 4;
  if (k == 0) return block;
  const int64_t T = block.dim(0), H = block.dim(1), W = block.dim(2), C = block.dim(3);
  const int64_t OH = (k % 2 == 0) ? H : W;
  const int64_t OW = (k % 2 == 0) ? W : H;
  Tensor out({T, OH, OW, C});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t r = 0; r < OH; ++r)
      for (int64_t c = 0; c < OW; ++c) {
        int64_t sr = 0, sc = 0;
        switch (k) {
          case 1: sr = c; sc = W - 1 - r; break;          // 90 CCW
          case 2: sr = H - 1 - r; sc = W - 1 - c; break;  // 180
          case 3: sr = H - 1 - c; sc = r; break;          // 270
        }
        for (int64_t ch = 0; ch < C; ++ch)
          out.at(t, r, c, ch) = block.at(t, sr, sc, ch);
      }
  return out;
}

Tensor hflip_frames(const Tensor& block) {
  const int64_t T = block.dim(0), H = block.dim(1), W = block.dim(2), C = block.dim(3);
  Tensor out(block.shape);
  for (int64_t t = 0; t < T; ++t)
    for (int64_t r = 0; r < H; ++r)
      for (int64_t c = 0; c < W; ++c)
        for (int64_t ch = 0; ch < C; ++ch) out.at(t, r, c, ch) = block.at(t, r, W - 1 - c, ch);
  return out;
}

Tensor sobel_frames(const Tensor& block) {
  const int64_t T = block.dim(0), H = block.dim(1), W = block.dim(2), C = block.dim(3);
  Tensor out(block.shape);
  static const double kx[3][3] = {{-1, 0, 1}, {-2, 0, 2}, {-1, 0, 1}};
  static const double ky[3][3] = {{-1, -2, -1}, {0, 0, 0}, {1, 2, 1}};
  auto clampi = [](int64_t v, int64_t hi) { return std::min(std::max(v, int64_t{0}), hi); };
  for (int64_t t = 0; t < T; ++t)
    for (int64_t ch = 0; ch < C; ++ch)
      for (int64_t r = 0; r < H; ++r)
        for (int64_t c = 0; c < W; ++c) {
          double gx = 0.0, gy = 0.0;
          for (int dr = -1; dr <= 1; ++dr)
            for (int dc = -1; dc <= 1; ++dc) {
              const double v =
                  block.at(t, clampi(r + dr, H - 1), clampi(c + dc, W - 1), ch);
              gx += kx[dr + 1][dc + 1] * v;
              gy += ky[dr + 1][dc + 1] * v;
            }
          out.at(t, r, c, ch) = std::sqrt(gx * gx + gy * gy);
        }
  return out;
}

Tensor center_crop(const Tensor& frames, int crop_size) {
  const int64_t T = frames.dim(0), H = frames.dim(1), W = frames.dim(2), C = frames.dim(3);
  if (crop_size > H || crop_size > W)
    fail("ShapeMismatch", "center_crop: crop " + std::to_string(crop_size) + " exceeds " +
                              frames.shape_str());
  const int64_t y0 = (H - crop_size) / 2, x0 = (W - crop_size) / 2;
  Tensor out({T, crop_size, crop_size, C});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t r = 0; r < crop_size; ++r)
      for (int64_t c = 0; c < crop_size; ++c)
        for (int64_t ch = 0; ch < C; ++ch) out.at(t, r, c, ch) = frames.at(t, y0 + r, x0 + c, ch);
  return out;
}

// ---------------- policy application ----------------

namespace {

Tensor crop_block(const Tensor& block, int y0, int x0, int size) {
  const int64_t T = block.dim(0), C = block.dim(3);
  Tensor out({T, size, size, C});
  for (int64_t t = 0; t < T; ++t)
    for (int64_t r = 0; r < size; ++r)
      for (int64_t c = 0; c < size; ++c)
        for (int64_t ch = 0; ch < C; ++ch) out.at(t, r, c, ch) = block.at(t, y0 + r, x0 + c, ch);
  return out;
}

struct JitterParams {
  double brightness, contrast, saturation, hue;
};

JitterParams sample_jitter(const JitterStrength& s, Rng& rng) {
  JitterParams p;
  p.brightness = rng.uniform(-s.brightness, s.brightness);
  p.contrast = rng.uniform(-s.contrast, s.contrast);
  p.saturation = rng.uniform(-s.saturation, s.saturation);
  p.hue = rng.uniform(-s.hue, s.hue);
  return p;
}

void jitter_frame(Tensor& block, int64_t t, const JitterParams& p) {
  const int64_t H = block.dim(1), W = block.dim(2), C = block.dim(3);
  const int64_t npix = H * W;
  double* frame = &block.data[static_cast<size_t>(t * npix * C)];
  // brightness
  const double bs = 1.0 + p.brightness;
  for (int64_t i = 0; i < npix * C; ++i) frame[i] *= bs;
  // contrast around the frame mean
  double mean = 0.0;
  for (int64_t i = 0; i < npix * C; ++i) mean += frame[i];
  mean /= static_cast<double>(npix * C);
  const double cs = 1.0 + p.contrast;
  for (int64_t i = 0; i < npix * C; ++i) frame[i] = (frame[i] - mean) * cs + mean;
  if (C == 3) {
    // saturation: blend toward per-pixel gray
    const double ss = 1.0 + p.saturation;
    for (int64_t i = 0; i < npix; ++i) {
      double* px = frame + i * 3;
      const double gray = (px[0] + px[1] + px[2]) / 3.0;
      for (int k = 0; k < 3; ++k) px[k] = gray + (px[k] - gray) * ss;
    }
    // hue: rotate around the gray axis, leaves achromatic pixels fixed
    const double theta = p.hue * 2.0 * M_PI;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double a = ct + (1.0 - ct) / 3.0;
    const double b = (1.0 - ct) / 3.0 + st / std::sqrt(3.0);
    const double c = (1.0 - ct) / 3.0 - st / std::sqrt(3.0);
    for (int64_t i = 0; i < npix; ++i) {
      double* px = frame + i * 3;
      const double r0 = px[0], g0 = px[1], b0 = px[2];
      px[0] = a * r0 + b * g0 + c * b0;
      px[1] = c * r0 + a * g0 + b * b0;
      px[2] = b * r0 + c * g0 + a * b0;
    }
  }
}

struct PartitionParams {
  AugmentTrace::PartitionParams p;
};

AugmentTrace::PartitionParams sample_params(const AugmentPolicy& policy, int64_t H, int64_t W,
                                            Rng& rng) {
  AugmentTrace::PartitionParams p;
  if (policy.has(AugmentOp::Crop)) {
    if (policy.crop_size > H || policy.crop_size > W)
      fail("ShapeMismatch", "crop_size exceeds input spatial dims");
    p.crop_y = static_cast<int>(rng.uniform_int(0, H - policy.crop_size));
    p.crop_x = static_cast<int>(rng.uniform_int(0, W - policy.crop_size));
  }
  if (policy.has(AugmentOp::HFlip)) p.flipped = rng.bernoulli(0.5);
  if (policy.has(AugmentOp::Rot90)) p.rot_k = static_cast<int>(rng.uniform_int(0, 3));
  if (policy.has(AugmentOp::Sobel)) p.sobel_applied = rng.bernoulli(policy.sobel_prob);
  return p;
}

void apply_ops(std::vector<Tensor>& blocks, const AugmentPolicy& policy,
               const AugmentTrace::PartitionParams& params, bool is_present, Rng& rng) {
  for (AugmentOp op : policy.ops) {
    const bool skip = is_present && policy.pf_only(op);
    switch (op) {
      case AugmentOp::Crop:
        if (!skip)
          for (auto& b : blocks) b = crop_block(b, params.crop_y, params.crop_x, policy.crop_size);
        break;
      case AugmentOp::HFlip:
        if (!skip && params.flipped)
          for (auto& b : blocks) b = hflip_frames(b);
        break;
      case AugmentOp::ColorJitter: {
        if (skip) break;
        if (policy.jitter_per_frame) {
          for (auto& b : blocks)
            for (int64_t t = 0; t < b.dim(0); ++t) jitter_frame(b, t, sample_jitter(policy.jitter, rng));
        } else {
          const JitterParams jp = sample_jitter(policy.jitter, rng);
          for (auto& b : blocks)
            for (int64_t t = 0; t < b.dim(0); ++t) jitter_frame(b, t, jp);
        }
        break;
      }
      case AugmentOp::Sobel:
        if (!skip && params.sobel_applied)
          for (auto& b : blocks) b = sobel_frames(b);
        break;
      case AugmentOp::Rot90:
        if (!skip && params.rot_k != 0)
          for (auto& b : blocks) b = rot90_frames(b, params.rot_k);
        break;
    }
  }
}

}  // namespace

BlockPartition augment_partition(const BlockPartition& partition, const AugmentPolicy& policy,
                                 Rng& rng, AugmentTrace* trace) {
  policy.validate();
  BlockPartition out = partition;
  const Tensor* any = nullptr;
  if (!out.present_blocks.empty()) any = &out.present_blocks.front();
  else if (!out.past_blocks.empty()) any = &out.past_blocks.front();
  else if (!out.future_blocks.empty()) any = &out.future_blocks.front();
  if (!any) return out;
  const int64_t H = any->dim(1), W = any->dim(2);

  AugmentTrace::PartitionParams pp, vp, fp;
  if (policy.mode == AugmentMode::Consistent) {
    pp = vp = fp = sample_params(policy, H, W, rng);
  } else {
    pp = sample_params(policy, H, W, rng);
    vp = sample_params(policy, H, W, rng);
    fp = sample_params(policy, H, W, rng);
  }
  if (trace) {
    trace->past = pp;
    trace->present = vp;
    trace->future = fp;
  }
  apply_ops(out.past_blocks, policy, pp, false, rng);
  apply_ops(out.present_blocks, policy, vp, true, rng);
  apply_ops(out.future_blocks, policy, fp, false, rng);
  return out;
}

}  // namespace bifp

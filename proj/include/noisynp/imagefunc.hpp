#pragma once

#include <algorithm>
#include <filesystem>
#include <string>
#include <vector>

#include "noisynp/eval.hpp"
#include "noisynp/models.hpp"
#include "noisynp/png_io.hpp"
#include "noisynp/tasks.hpp"

namespace noisynp {

// Images as 2D functions from pixel position to channel values. Channel
// statistics are computed once over the whole set (train statistics) and
// reused for de-normalization.
struct ImageFunctionSet {
  long height = 0;
  long width = 0;
  long channels = 3;
  std::vector<ImageU8> images;
  Vecd channel_mean;  // [channels]
  Vecd channel_std;   // [channels]

  long n_pixels() const { return height * width; }
};

// Pixel (r, c) maps to x in [-1, 1]^2 with corners at the grid corners.
inline Eigen::Vector2d pixel_coord(long r, long c, long h, long w) {
  const double xr = (h > 1) ? 2.0 * static_cast<double>(r) / (h - 1) - 1.0 : 0.0;
  const double xc = (w > 1) ? 2.0 * static_cast<double>(c) / (w - 1) - 1.0 : 0.0;
  return {xr, xc};
}

inline ImageFunctionSet load_image_set(const std::string& dir, long size = 32) {
  namespace fs = std::filesystem;
  ImageFunctionSet set;
  set.height = set.width = size;
  std::vector<std::string> files;
  if (!fs::is_directory(dir)) throw IoError("image directory not found: " + dir);
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".png") files.push_back(e.path().string());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw IoError("no .png files in " + dir);
  for (const auto& f : files) {
    ImageU8 img = read_png(f);
    if (img.height != size || img.width != size)
      img = resize_bilinear(img, size, size);
    set.images.push_back(std::move(img));
  }

  set.channel_mean = Vecd::Zero(3);
  set.channel_std = Vecd::Zero(3);
  const double count =
      static_cast<double>(set.images.size()) * set.height * set.width;
  for (const auto& img : set.images)
    for (long r = 0; r < size; ++r)
      for (long c = 0; c < size; ++c)
        for (long ch = 0; ch < 3; ++ch)
          set.channel_mean(ch) += img.at(r, c, ch) / 255.0;
  set.channel_mean /= count;
  for (const auto& img : set.images)
    for (long r = 0; r < size; ++r)
      for (long c = 0; c < size; ++c)
        for (long ch = 0; ch < 3; ++ch) {
          const double d = img.at(r, c, ch) / 255.0 - set.channel_mean(ch);
          set.channel_std(ch) += d * d;
        }
  set.channel_std = (set.channel_std / count).cwiseSqrt().cwiseMax(1e-6);
  return set;
}

// Full-grid PointSet of one image: n = H*W rows, x = normalized (row, col),
// y = per-channel standardized values. image_from_function inverts exactly
// for 8-bit inputs.
inline PointSet image_to_function(const ImageU8& img,
                                  const ImageFunctionSet& set) {
  if (img.height != set.height || img.width != set.width)
    throw ConfigError("image_to_function: image does not match set shape");
  PointSet ps;
  const long n = set.n_pixels();
  ps.x.resize(n, 2);
  ps.y.resize(n, set.channels);
  for (long r = 0; r < set.height; ++r) {
    for (long c = 0; c < set.width; ++c) {
      const long i = r * set.width + c;
      ps.x.row(i) = pixel_coord(r, c, set.height, set.width).transpose();
      for (long ch = 0; ch < set.channels; ++ch)
        ps.y(i, ch) = (img.at(r, c, ch) / 255.0 - set.channel_mean(ch)) /
                      set.channel_std(ch);
    }
  }
  return ps;
}

inline ImageU8 image_from_function(const Matd& y, const ImageFunctionSet& set) {
  ImageU8 img;
  img.height = set.height;
  img.width = set.width;
  img.data.resize(static_cast<std::size_t>(set.n_pixels() * 3));
  for (long i = 0; i < set.n_pixels(); ++i) {
    for (long ch = 0; ch < set.channels; ++ch) {
      const double v =
          (y(i, ch) * set.channel_std(ch) + set.channel_mean(ch)) * 255.0;
      img.data[static_cast<std::size_t>(i * 3 + ch)] = static_cast<unsigned char>(
          std::clamp<long>(std::lround(v), 0, 255));
    }
  }
  return img;
}

// One batch of image-completion tasks: disjoint uniformly sampled context
// and target pixel subsets, noise per the setup x phase matrix with the
// channels of a selected pixel noised independently.
inline TaskBatch sample_image_task(const ImageFunctionSet& set, long n_ctx,
                                   long n_tar, const NoiseSpec& noise,
                                   Setup setup, Phase phase, Rng& rng,
                                   long batch = 1,
                                   std::vector<long>* image_ids = nullptr) {
  noise.validate();
  if (n_ctx + n_tar > set.n_pixels())
    throw ConfigError("sample_image_task: context+target exceeds pixel count");
  if (n_tar < 1) throw ConfigError("sample_image_task: need target pixels");

  TaskBatch tb;
  tb.setup = setup;
  tb.batch = batch;
  tb.n_ctx = n_ctx;
  tb.n_tar = n_tar;
  tb.ctx.x.resize(batch * n_ctx, 2);
  tb.ctx.y.resize(batch * n_ctx, set.channels);
  tb.tar.x.resize(batch * n_tar, 2);
  tb.tar.y.resize(batch * n_tar, set.channels);
  tb.clean_tar_y.resize(batch * n_tar, set.channels);
  tb.noise_mask_ctx.assign(static_cast<std::size_t>(batch * n_ctx), false);
  tb.noise_mask_tar.assign(static_cast<std::size_t>(batch * n_tar), false);

  bool noise_ctx = false, noise_tar = false;
  detail::noise_flags(setup, phase, noise_ctx, noise_tar);

  for (long b = 0; b < batch; ++b) {
    const long img_id = rng.uniform_int(0, static_cast<long>(set.images.size()) - 1);
    if (image_ids) image_ids->push_back(img_id);
    const PointSet full = image_to_function(set.images[static_cast<std::size_t>(img_id)], set);
    const std::vector<long> pix =
        rng.sample_without_replacement(set.n_pixels(), n_ctx + n_tar);

    auto fill = [&](PointSet& dst, long offset, long from, long count) {
      for (long i = 0; i < count; ++i) {
        const long p = pix[static_cast<std::size_t>(from + i)];
        dst.x.row(offset + i) = full.x.row(p);
        dst.y.row(offset + i) = full.y.row(p);
      }
    };
    fill(tb.ctx, b * n_ctx, 0, n_ctx);
    fill(tb.tar, b * n_tar, n_ctx, n_tar);
    tb.clean_tar_y.middleRows(b * n_tar, n_tar) =
        tb.tar.y.middleRows(b * n_tar, n_tar);

    // Per-pixel selection, i.i.d. noise per channel of a selected pixel.
    auto apply_noise = [&](Matd& y, std::vector<bool>& mask, long offset,
                           long count) {
      const long hit = round_half_even(noise.rate * static_cast<double>(count));
      if (hit == 0) return;
      for (long idx : rng.sample_without_replacement(count, hit)) {
        mask[static_cast<std::size_t>(offset + idx)] = true;
        if (noise.std > 0.0)
          for (long ch = 0; ch < set.channels; ++ch)
            y(offset + idx, ch) += rng.normal(0.0, noise.std);
      }
    };
    if (noise_ctx) apply_noise(tb.ctx.y, tb.noise_mask_ctx, b * n_ctx, n_ctx);
    if (noise_tar) apply_noise(tb.tar.y, tb.noise_mask_tar, b * n_tar, n_tar);
  }
  return tb;
}

struct RenderResult {
  ImageU8 image;    // de-normalized mean prediction, clamped for display
  Matd mean;        // [H*W, C] normalized predictive means (K-averaged)
  Matd std;         // [H*W, C] normalized predictive stds (K-averaged)
};

// Queries every pixel as a target given the (possibly noisy) context of
// `task` row-block `b`; pixel value is the K-sample average of predictive
// means under z ~ p(z | ctx). Deterministic variants ignore K.
template <class S>
RenderResult render_prediction(ParamStore<S>& params, ModelVariant v,
                               const ModelConfig& cfg,
                               const ImageFunctionSet& set,
                               const TaskBatch& task, long K, Rng& rng,
                               long b = 0) {
  const long n_pix = set.n_pixels();
  Matd grid_x(n_pix, 2);
  for (long r = 0; r < set.height; ++r)
    for (long c = 0; c < set.width; ++c)
      grid_x.row(r * set.width + c) =
          pixel_coord(r, c, set.height, set.width).transpose();

  TaskBatch one;
  one.batch = 1;
  one.n_ctx = task.n_ctx;
  one.n_tar = n_pix;
  one.setup = task.setup;
  one.ctx.x = task.ctx.x.middleRows(b * task.n_ctx, task.n_ctx);
  one.ctx.y = task.ctx.y.middleRows(b * task.n_ctx, task.n_ctx);
  one.tar.x = grid_x;
  one.tar.y = Matd::Zero(n_pix, set.channels);
  one.clean_tar_y = one.tar.y;

  Tape<S> tape(/*recording=*/false);
  BoundParams<S> bound(tape, params);
  const long k_eff = v.has_latent() ? K : 1;
  ModelConfig mcfg = cfg;
  if (v.bootstrapped()) mcfg.eval_bootstrap = std::max<long>(K - 1, 1);
  ModelOutput<S> out = forward(bound, v, mcfg, one, k_eff, rng, Phase::eval,
                               /*include_ctx_in_query=*/false);

  RenderResult res;
  res.mean = Matd::Zero(n_pix, set.channels);
  res.std = Matd::Zero(n_pix, set.channels);
  for (const auto& pred : out.predictions) {
    res.mean += tape.val(pred.mean).template cast<double>();
    res.std += tape.val(pred.std).template cast<double>();
  }
  res.mean /= static_cast<double>(out.predictions.size());
  res.std /= static_cast<double>(out.predictions.size());
  res.image = image_from_function(res.mean, set);
  return res;
}

// Grey-background visualization of the observed context pixels.
inline ImageU8 context_image(const ImageFunctionSet& set, const TaskBatch& task,
                             long b = 0) {
  ImageU8 img;
  img.height = set.height;
  img.width = set.width;
  img.data.assign(static_cast<std::size_t>(set.n_pixels() * 3), 128);
  for (long i = 0; i < task.n_ctx; ++i) {
    const auto x = task.ctx.x.row(b * task.n_ctx + i);
    const long r = std::lround((x(0) + 1.0) * (set.height - 1) / 2.0);
    const long c = std::lround((x(1) + 1.0) * (set.width - 1) / 2.0);
    for (long ch = 0; ch < set.channels; ++ch) {
      const double v = (task.ctx.y(b * task.n_ctx + i, ch) * set.channel_std(ch) +
                        set.channel_mean(ch)) *
                       255.0;
      img.at(r, c, ch) = static_cast<unsigned char>(
          std::clamp<long>(std::lround(v), 0, 255));
    }
  }
  return img;
}

// Horizontal strip with 1px separators: clean | context | renders...
inline ImageU8 compose_strip(const std::vector<ImageU8>& panels) {
  if (panels.empty()) throw ConfigError("compose_strip: no panels");
  const long h = panels[0].height;
  long w = -1;
  for (const auto& p : panels) w += p.width + 1;
  ImageU8 strip;
  strip.height = h;
  strip.width = w;
  strip.data.assign(static_cast<std::size_t>(h * w * 3), 255);
  long at = 0;
  for (const auto& p : panels) {
    if (p.height != h) throw ConfigError("compose_strip: height mismatch");
    for (long r = 0; r < h; ++r)
      for (long c = 0; c < p.width; ++c)
        for (long ch = 0; ch < 3; ++ch)
          strip.at(r, at + c, ch) = p.at(r, c, ch);
    at += p.width + 1;
  }
  return strip;
}

}  // namespace noisynp

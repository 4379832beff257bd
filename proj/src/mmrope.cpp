#include "xstream/mmrope.hpp"

#include <charconv>
#include <cmath>
#include <string>

namespace xstream {

void RopeParams::validate() const {
  if (head_dim == 0 || head_dim % 2 != 0)
    throw ConfigError("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  if (d_t % 2 != 0 || d_h % 2 != 0 || d_w % 2 != 0) throw ConfigError("rope: every dim_split part must be even");
  if (d_t + d_h + d_w != head_dim)
    throw ConfigError("rope: dim_split " + std::to_string(d_t) + "+" + std::to_string(d_h) + "+" +
                      std::to_string(d_w) + " does not sum to head_dim " + std::to_string(head_dim));
  if (!(base > 1.0)) throw ConfigError("rope: base must be > 1");
}

RopeParams RopeParams::split_default(std::size_t head_dim, double base) {
  if (head_dim == 0 || head_dim % 2 != 0)
    throw ConfigError("rope: head_dim must be even and positive, got " + std::to_string(head_dim));
  RopeParams p;
  p.head_dim = head_dim;
  p.base = base;
  p.d_h = p.d_w = (head_dim / 4) & ~std::size_t{1};
  p.d_t = head_dim - p.d_h - p.d_w;
  p.validate();
  return p;
}

RopeParams RopeParams::one_dimensional(std::size_t head_dim, double base) {
  RopeParams p;
  p.head_dim = head_dim;
  p.d_t = head_dim;
  p.d_h = p.d_w = 0;
  p.base = base;
  p.validate();
  return p;
}

RopeParams RopeParams::parse(std::string_view dim_split, std::size_t head_dim, double base) {
  if (dim_split == "auto") return split_default(head_dim, base);
  std::size_t parts[3];
  std::size_t idx = 0;
  std::size_t pos = 0;
  while (idx < 3) {
    const auto comma = dim_split.find(',', pos);
    const auto tok = dim_split.substr(pos, comma == std::string_view::npos ? std::string_view::npos : comma - pos);
    auto [p, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), parts[idx]);
    if (ec != std::errc() || p != tok.data() + tok.size())
      throw ConfigError("rope.dim_split must be 'auto' or 't,h,w', got '" + std::string(dim_split) + "'");
    ++idx;
    if (comma == std::string_view::npos) break;
    pos = comma + 1;
  }
  if (idx != 3) throw ConfigError("rope.dim_split must have three parts, got '" + std::string(dim_split) + "'");
  RopeParams r;
  r.head_dim = head_dim;
  r.d_t = parts[0];
  r.d_h = parts[1];
  r.d_w = parts[2];
  r.base = base;
  r.validate();
  return r;
}

namespace {

// Fills angles for one head: pairs of the t block, then h, then w.
void head_angles(const Pos3D& pos, const RopeParams& p, double* out) {
  std::size_t k = 0;
  auto block = [&](std::size_t d, double coord) {
    for (std::size_t i = 0; i < d / 2; ++i)
      out[k++] = coord * std::pow(p.base, -2.0 * static_cast<double>(i) / static_cast<double>(d));
  };
  block(p.d_t, pos.t);
  block(p.d_h, pos.h);
  block(p.d_w, pos.w);
}

}  // namespace

template <typename T>
RopeTable<T> build_rope_table(std::span<const Pos3D> positions, const RopeParams& params, std::size_t heads) {
  params.validate();
  const std::size_t pairs = params.head_dim / 2;
  auto cos = std::make_shared<std::vector<T>>(positions.size() * heads * pairs);
  auto sin = std::make_shared<std::vector<T>>(positions.size() * heads * pairs);
  std::vector<double> ang(pairs);
  for (std::size_t r = 0; r < positions.size(); ++r) {
    head_angles(positions[r], params, ang.data());
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < pairs; ++i) {
        const std::size_t idx = (r * heads + h) * pairs + i;
        (*cos)[idx] = static_cast<T>(std::cos(ang[i]));
        (*sin)[idx] = static_cast<T>(std::sin(ang[i]));
      }
  }
  return {cos, sin};
}

template <typename T>
BasicTensor<T> rotate_rows(const BasicTensor<T>& x, std::span<const Pos3D> positions, const RopeParams& params) {
  if (x.rank() != 2) throw DimensionError("rotate: expected rank-2 input");
  if (x.cols() % params.head_dim != 0)
    throw DimensionError("rotate: last dim " + std::to_string(x.cols()) + " is not a multiple of head_dim " +
                         std::to_string(params.head_dim));
  if (positions.size() != x.rows()) throw DimensionError("rotate: one position per row required");
  const auto table = build_rope_table<T>(positions, params, x.cols() / params.head_dim);
  Graph<T> g(false);
  return g.value(g.pair_rotate(g.input_ref(x), table.cos, table.sin));
}

template <typename T>
BasicTensor<T> rotate(const BasicTensor<T>& x, const Pos3D& pos, const RopeParams& params) {
  params.validate();
  if (x.shape().back() != params.head_dim)
    throw DimensionError("rotate: last dim " + std::to_string(x.shape().back()) + " != head_dim " +
                         std::to_string(params.head_dim));
  const std::size_t rows = x.size() / params.head_dim;
  std::vector<Pos3D> ps(rows, pos);
  auto flat = x.reshaped({rows, params.head_dim});
  return rotate_rows(flat, ps, params).reshaped(x.shape());
}

std::vector<Pos3D> chunk_positions(const SegmentConfig& cfg, double chunk_time) {
  std::vector<Pos3D> out;
  const std::uint32_t cols = cfg.grid_cols();
  out.reserve(cfg.tokens_per_video_chunk());
  for (std::uint32_t i = 0; i < cfg.tokens_per_video_chunk(); ++i)
    out.push_back({chunk_time, static_cast<double>(i / cols), static_cast<double>(i % cols)});
  return out;
}

std::vector<Pos3D> positions_for_plan(const SegmentPlan& plan, const SegmentConfig& cfg) {
  std::vector<Pos3D> out;
  out.reserve(plan.total_tokens());
  const std::uint64_t seg = plan.segment_index;
  for (const auto& slot : plan.slots) {
    switch (slot.modality) {
      case Modality::text:
        for (std::uint32_t j = 0; j < slot.token_count; ++j)
          out.push_back({text_token_time(cfg, seg, j).time_index, 0, 0});
        break;
      case Modality::audio:
        for (std::uint32_t i = 0; i < slot.token_count; ++i)
          out.push_back({audio_token_time(cfg, seg * cfg.audio_tokens_per_segment + i).time_index, 0, 0});
        break;
      case Modality::video: {
        const std::uint64_t global = seg * cfg.video_chunks_per_segment + slot.chunk_index.value_or(0);
        auto ps = chunk_positions(cfg, video_chunk_time(cfg, global).time_index);
        out.insert(out.end(), ps.begin(), ps.end());
        break;
      }
    }
  }
  return out;
}

template RopeTable<float> build_rope_table(std::span<const Pos3D>, const RopeParams&, std::size_t);
template RopeTable<double> build_rope_table(std::span<const Pos3D>, const RopeParams&, std::size_t);
template BasicTensor<float> rotate_rows(const BasicTensor<float>&, std::span<const Pos3D>, const RopeParams&);
template BasicTensor<double> rotate_rows(const BasicTensor<double>&, std::span<const Pos3D>, const RopeParams&);
template BasicTensor<float> rotate(const BasicTensor<float>&, const Pos3D&, const RopeParams&);
template BasicTensor<double> rotate(const BasicTensor<double>&, const Pos3D&, const RopeParams&);

}  // namespace xstream

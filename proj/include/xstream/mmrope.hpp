#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string_view>
#include <vector>

#include "xstream/interleave.hpp"
#include "xstream/numcore.hpp"

namespace xstream {

// Rotary embedding layout for one attention head. The head is split into a
// temporal block of d_t dims followed by height (d_h) and width (d_w) blocks.
struct RopeParams {
  std::size_t head_dim = 16;
  std::size_t d_t = 8;
  std::size_t d_h = 4;
  std::size_t d_w = 4;
  double base = 10000.0;

  void validate() const;

  // Half of the head to time, a quarter each to height and width.
  static RopeParams split_default(std::size_t head_dim, double base = 10000.0);
  static RopeParams one_dimensional(std::size_t head_dim, double base = 10000.0);
  // "auto" or "t,h,w"
  static RopeParams parse(std::string_view dim_split, std::size_t head_dim, double base);
};

struct Pos3D {
  double t = 0.0;
  double h = 0.0;
  double w = 0.0;
  bool operator==(const Pos3D&) const = default;
};

// Rotates every row of x[rows, head_dim] by the same position.
template <typename T>
BasicTensor<T> rotate(const BasicTensor<T>& x, const Pos3D& pos, const RopeParams& params);

// Rotates row r of x[rows, heads * head_dim] by positions[r], identically for every head.
template <typename T>
BasicTensor<T> rotate_rows(const BasicTensor<T>& x, std::span<const Pos3D> positions, const RopeParams& params);

// Per-(row, pair) cos/sin tables for Graph::pair_rotate over `heads` heads.
template <typename T>
struct RopeTable {
  std::shared_ptr<const std::vector<T>> cos;
  std::shared_ptr<const std::vector<T>> sin;
};

template <typename T>
RopeTable<T> build_rope_table(std::span<const Pos3D> positions, const RopeParams& params, std::size_t heads);

// One position per plan token in slot order: text, audio, then each video
// chunk's tokens in raster order.
std::vector<Pos3D> positions_for_plan(const SegmentPlan& plan, const SegmentConfig& cfg);

// Raster positions of the tokens of one video chunk at global index `chunk`.
std::vector<Pos3D> chunk_positions(const SegmentConfig& cfg, double chunk_time);

}  // namespace xstream

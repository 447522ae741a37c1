#pragma once

#include <cstdint>
#include <vector>

namespace co3 {

// Row-major integer grid (batch rows x time steps).
struct IdGrid {
  int rows = 0;
  int cols = 0;
  std::vector<int> ids;

  IdGrid() = default;
  IdGrid(int r, int c, int fill) : rows(r), cols(c), ids(static_cast<size_t>(r) * c, fill) {}

  int& at(int r, int c) { return ids[static_cast<size_t>(r) * cols + c]; }
  int at(int r, int c) const { return ids[static_cast<size_t>(r) * cols + c]; }

  std::vector<int> column(int c) const {
    std::vector<int> out(rows);
    for (int r = 0; r < rows; ++r) out[r] = at(r, c);
    return out;
  }
};

// Row-major boolean grid; 1 marks a real token.
struct Mask {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int r, int c, bool fill) : rows(r), cols(c), bits(static_cast<size_t>(r) * c, fill ? 1 : 0) {}

  bool operator()(int r, int c) const { return bits[static_cast<size_t>(r) * cols + c] != 0; }
  void set(int r, int c, bool v) { bits[static_cast<size_t>(r) * cols + c] = v ? 1 : 0; }

  std::vector<std::uint8_t> column(int c) const {
    std::vector<std::uint8_t> out(rows);
    for (int r = 0; r < rows; ++r) out[r] = bits[static_cast<size_t>(r) * cols + c];
    return out;
  }

  // Mask with one column per row length.
  static Mask from_lengths(const std::vector<int>& lengths, int width) {
    Mask m(static_cast<int>(lengths.size()), width, false);
    for (int r = 0; r < m.rows; ++r)
      for (int c = 0; c < lengths[r] && c < width; ++c) m.set(r, c, true);
    return m;
  }
};

}  // namespace co3

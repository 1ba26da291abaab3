#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "demtg/prng.hpp"
#include "demtg/task_spec.hpp"
#include "demtg/tensor.hpp"

namespace demtg {

// One multi-task sample. Real-valued arrays are quantized through 32-bit
// floats at generation time so the on-disk round trip is bit-exact.
struct Sample {
  Tensor image;  // [H,W,3] in [0,1]
  std::map<std::string, std::vector<std::uint16_t>> int_labels;  // seg / binary maps
  std::map<std::string, Tensor> real_labels;                     // [H,W,ch] regression maps
  // Optional per-task validity masks (1 = valid); absent means all valid.
  // Synthetic scenes are fully labeled and leave this empty.
  std::map<std::string, std::vector<std::uint8_t>> masks;
};

struct TaskInfo {
  std::string name;
  TaskKind kind = TaskKind::kMulticlassSeg;
  int channels = 1;
};

struct Dataset {
  int h = 0, w = 0;
  std::vector<TaskInfo> tasks;
  std::vector<Sample> samples;
};

// ---- per-class attribute palettes ----
// Fixed functions of the class id (and K), independent of the sample seed, so
// the same class looks the same across a whole dataset.

namespace detail {

inline double fract(double x) { return x - std::floor(x); }

inline std::array<double, 3> hsv_to_rgb(double hue, double sat, double val) {
  const double h6 = hue * 6.0;
  const int i = static_cast<int>(h6) % 6;
  const double f = h6 - std::floor(h6);
  const double p = val * (1.0 - sat);
  const double q = val * (1.0 - sat * f);
  const double t = val * (1.0 - sat * (1.0 - f));
  switch (i) {
    case 0: return {val, t, p};
    case 1: return {q, val, p};
    case 2: return {p, val, t};
    case 3: return {p, q, val};
    case 4: return {t, p, val};
    default: return {val, p, q};
  }
}

inline double quant_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

}  // namespace detail

inline std::array<double, 3> class_color(int cls) {
  if (cls == 0) return {0.2, 0.2, 0.2};
  return detail::hsv_to_rgb(detail::fract(0.61803398875 * cls), 0.7, 0.9);
}

inline double class_depth(int cls, int k) {
  if (cls == 0) return 0.95;
  return 0.15 + 0.6 * (cls - 1) / std::max(1, k - 2);
}

inline std::array<double, 3> class_normal(int cls) {
  if (cls == 0) return {0.0, 0.0, 1.0};
  const double theta = 6.283185307179586 * detail::fract(0.61803398875 * cls);
  const double psi = (0.15 + 0.35 * detail::fract(0.38196601125 * cls)) * 1.5707963267948966;
  return {std::sin(psi) * std::cos(theta), std::sin(psi) * std::sin(theta), std::cos(psi)};
}

// ---- scene synthesis ----

// Places seeded axis-aligned rectangles and ellipses of distinct classes over
// a background and derives mutually consistent labels: class map, per-shape
// constant depth (nearer occludes), per-shape constant unit normal, and a
// boundary map at 4-neighborhood class changes. The image is the class color
// plus seeded noise of amplitude 0.05. n_shapes < 0 draws 1..K-1 shapes.
inline Sample synth_scene(std::uint64_t seed, int h, int w, int k, int n_shapes = -1,
                          double shape_scale = 0.375) {
  if (h % 32 != 0 || w % 32 != 0) {
    throw ConfigError("scene dims must be divisible by 32, got " + std::to_string(h) + "x" +
                      std::to_string(w));
  }
  if (k < 2) throw ConfigError("scene needs K >= 2 classes, got " + std::to_string(k));
  if (n_shapes > k - 1) {
    throw ConfigError("scene cannot place " + std::to_string(n_shapes) +
                      " shapes with distinct classes given K = " + std::to_string(k));
  }
  Prng rng(seed ^ 0x5ce7e5c01a9b2d4fULL);
  const int count = n_shapes >= 0 ? n_shapes : 1 + rng.uniform_int(k - 1);

  std::vector<int> class_pool;
  for (int c = 1; c < k; ++c) class_pool.push_back(c);
  rng.shuffle(class_pool);

  // Shapes live on a 4px grid with class-deterministic extents, placed with
  // disjoint boxes when rejection sampling finds room (overlaps are allowed
  // after that and resolved by depth order).
  struct Shape {
    bool ellipse;
    int y0, x0, ey, ex, cls;
  };
  static constexpr int kGrid = 4;
  if (shape_scale <= 0.0 || shape_scale > 0.8) {
    throw ConfigError("shape_scale must be in (0, 0.8]");
  }
  auto extent_for = [k, shape_scale](int dim, int cls, std::uint64_t salt) {
    const int base = std::max(kGrid, static_cast<int>(dim * shape_scale) / kGrid * kGrid);
    (void)k;
    const int ext = base + kGrid * static_cast<int>((static_cast<std::uint64_t>(cls) * 5 + salt) % 3);
    return std::min(ext, (dim - kGrid) / kGrid * kGrid);
  };
  std::vector<Shape> shapes;
  for (int s = 0; s < count; ++s) {
    Shape sh;
    sh.cls = class_pool[static_cast<std::size_t>(s)];
    // Kind and extent derive from the class so scenes sharing a class set
    // share pixel composition; only the arrangement varies with the seed.
    sh.ellipse = sh.cls % 2 == 0;
    sh.ey = std::min(extent_for(h, sh.cls, 0), h - kGrid);
    sh.ex = std::min(extent_for(w, sh.cls, 1), w - kGrid);
    // Origins sit at 4k+2 so shape edges land on the half-cell lines of the
    // 1/4-scale grid, where a x4 bilinear read-out can represent both a sharp
    // class crossing and the 2px boundary band around it.
    for (int tries = 0; tries < 64; ++tries) {
      sh.y0 = 2 + kGrid * rng.uniform_int((h - sh.ey - 2) / kGrid + 1);
      sh.x0 = 2 + kGrid * rng.uniform_int((w - sh.ex - 2) / kGrid + 1);
      bool clash = false;
      for (const Shape& p : shapes) {
        clash = clash || !(sh.y0 >= p.y0 + p.ey + 1 || p.y0 >= sh.y0 + sh.ey + 1 ||
                           sh.x0 >= p.x0 + p.ex + 1 || p.x0 >= sh.x0 + sh.ex + 1);
      }
      if (!clash) break;
    }
    shapes.push_back(sh);
  }
  // Far to near so nearer shapes paint over.
  std::sort(shapes.begin(), shapes.end(), [k](const Shape& a, const Shape& b) {
    return class_depth(a.cls, k) > class_depth(b.cls, k);
  });

  std::vector<std::uint16_t> seg(static_cast<std::size_t>(h) * w, 0);
  for (const Shape& sh : shapes) {
    for (int y = sh.y0; y < sh.y0 + sh.ey; ++y)
      for (int x = sh.x0; x < sh.x0 + sh.ex; ++x) {
        bool inside = true;
        if (sh.ellipse) {
          const double dy = (y - (sh.y0 + (sh.ey - 1) * 0.5)) / (sh.ey * 0.5);
          const double dx = (x - (sh.x0 + (sh.ex - 1) * 0.5)) / (sh.ex * 0.5);
          inside = dy * dy + dx * dx <= 1.0;
        }
        if (inside) seg[static_cast<std::size_t>(y) * w + x] = static_cast<std::uint16_t>(sh.cls);
      }
  }

  std::vector<std::uint16_t> bound(static_cast<std::size_t>(h) * w, 0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint16_t c = seg[static_cast<std::size_t>(y) * w + x];
      const bool edge =
          (y > 0 && seg[static_cast<std::size_t>(y - 1) * w + x] != c) ||
          (y + 1 < h && seg[static_cast<std::size_t>(y + 1) * w + x] != c) ||
          (x > 0 && seg[static_cast<std::size_t>(y) * w + (x - 1)] != c) ||
          (x + 1 < w && seg[static_cast<std::size_t>(y) * w + (x + 1)] != c);
      bound[static_cast<std::size_t>(y) * w + x] = edge ? 1 : 0;
    }

  std::vector<double> depth(static_cast<std::size_t>(h) * w);
  std::vector<double> normal(static_cast<std::size_t>(h) * w * 3);
  std::vector<double> image(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int cls = seg[static_cast<std::size_t>(y) * w + x];
      depth[static_cast<std::size_t>(y) * w + x] = detail::quant_f32(class_depth(cls, k));
      const auto nv = class_normal(cls);
      const auto cv = class_color(cls);
      for (int p = 0; p < 3; ++p) {
        normal[(static_cast<std::size_t>(y) * w + x) * 3 + p] = detail::quant_f32(nv[static_cast<std::size_t>(p)]);
        double v = cv[static_cast<std::size_t>(p)] + rng.uniform(-0.05, 0.05);
        v = std::min(1.0, std::max(0.0, v));
        image[(static_cast<std::size_t>(y) * w + x) * 3 + p] = detail::quant_f32(v);
      }
    }

  Sample s;
  s.image = Tensor::from_data({h, w, 3}, std::move(image));
  s.int_labels["semseg"] = std::move(seg);
  s.int_labels["bound"] = std::move(bound);
  s.real_labels["depth"] = Tensor::from_data({h, w, 1}, std::move(depth));
  s.real_labels["normal"] = Tensor::from_data({h, w, 3}, std::move(normal));
  return s;
}

inline std::vector<TaskInfo> synth_task_table(int k) {
  return {{"semseg", TaskKind::kMulticlassSeg, k},
          {"depth", TaskKind::kRegression1, 1},
          {"normal", TaskKind::kRegression3, 3},
          {"bound", TaskKind::kBinaryMap, 1}};
}

inline Dataset synth_dataset(std::uint64_t seed, int n_samples, int h, int w, int k,
                             int n_shapes = -1, double shape_scale = 0.375) {
  if (n_samples < 1) throw ConfigError("dataset needs at least one sample");
  Dataset d;
  d.h = h;
  d.w = w;
  d.tasks = synth_task_table(k);
  Prng master(seed);
  for (int i = 0; i < n_samples; ++i) {
    d.samples.push_back(synth_scene(master.next_u64(), h, w, k, n_shapes, shape_scale));
  }
  return d;
}

// ---- binary container ----
// magic "DMTG" | u32 version=1 | u32 n_samples | u32 H | u32 W | u32 n_tasks |
// per task (u8 name_len, name, u8 kind, u8 channels) | samples in order.
// Per sample: image as f32 (H*W*3), then per task in table order: u16 per
// pixel for integer maps, f32 for real maps. Everything little-endian.

namespace detail {

inline void put_u8(std::string& out, std::uint8_t v) { out.push_back(static_cast<char>(v)); }

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(out, bits);
}

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_f64(std::string& out, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  put_u64(out, bits);
}

class ByteReader {
 public:
  ByteReader(const std::string& bytes, const std::string& what) : bytes_(bytes), what_(what) {}

  std::uint64_t offset() const { return off_; }

  std::uint8_t u8() {
    need(1);
    return static_cast<std::uint8_t>(bytes_[off_++]);
  }

  std::uint16_t u16() {
    need(2);
    std::uint16_t v = static_cast<std::uint8_t>(bytes_[off_]) |
                      (static_cast<std::uint16_t>(static_cast<std::uint8_t>(bytes_[off_ + 1])) << 8);
    off_ += 2;
    return v;
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(bytes_[off_ + i])) << (8 * i);
    off_ += 4;
    return v;
  }

  float f32() {
    std::uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(bytes_[off_ + i])) << (8 * i);
    off_ += 8;
    return v;
  }

  double f64() {
    std::uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string str(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(off_, n);
    off_ += n;
    return s;
  }

  void expect_end() {
    if (off_ != bytes_.size()) {
      throw FormatError(what_ + ": trailing bytes", off_);
    }
  }

 private:
  void need(std::size_t n) {
    if (off_ + n > bytes_.size()) {
      throw FormatError(what_ + ": truncated", bytes_.size());
    }
  }

  const std::string& bytes_;
  std::string what_;
  std::uint64_t off_ = 0;
};

inline std::string read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

inline void write_file_bytes(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write to " + path);
}

}  // namespace detail

inline bool task_kind_is_integer(TaskKind k) {
  return k == TaskKind::kMulticlassSeg || k == TaskKind::kBinaryMap;
}

inline std::string encode_dataset(const Dataset& d) {
  if (d.samples.empty()) throw ContractError("dataset is empty");
  if (d.tasks.empty()) throw ContractError("dataset has no tasks");
  std::string out;
  out += "DMTG";
  detail::put_u32(out, 1);
  detail::put_u32(out, static_cast<std::uint32_t>(d.samples.size()));
  detail::put_u32(out, static_cast<std::uint32_t>(d.h));
  detail::put_u32(out, static_cast<std::uint32_t>(d.w));
  detail::put_u32(out, static_cast<std::uint32_t>(d.tasks.size()));
  for (const TaskInfo& t : d.tasks) {
    if (t.name.size() > 255) throw ContractError("task name too long: " + t.name);
    detail::put_u8(out, static_cast<std::uint8_t>(t.name.size()));
    out += t.name;
    detail::put_u8(out, static_cast<std::uint8_t>(t.kind));
    detail::put_u8(out, static_cast<std::uint8_t>(t.channels));
  }
  const std::size_t px = static_cast<std::size_t>(d.h) * d.w;
  for (const Sample& s : d.samples) {
    if (s.image.shape() != std::vector<int>{d.h, d.w, 3}) {
      throw ContractError("sample image shape " + shape_str(s.image.shape()) +
                          " does not match dataset header");
    }
    for (long long i = 0; i < s.image.size(); ++i)
      detail::put_f32(out, static_cast<float>(s.image[i]));
    for (const TaskInfo& t : d.tasks) {
      if (task_kind_is_integer(t.kind)) {
        auto it = s.int_labels.find(t.name);
        if (it == s.int_labels.end() || it->second.size() != px) {
          throw ContractError("sample lacks integer labels for task " + t.name);
        }
        for (std::uint16_t v : it->second) detail::put_u16(out, v);
      } else {
        auto it = s.real_labels.find(t.name);
        if (it == s.real_labels.end() ||
            it->second.shape() != std::vector<int>{d.h, d.w, t.channels}) {
          throw ContractError("sample lacks real labels for task " + t.name);
        }
        for (long long i = 0; i < it->second.size(); ++i)
          detail::put_f32(out, static_cast<float>(it->second[i]));
      }
    }
  }
  return out;
}

inline Dataset decode_dataset(const std::string& bytes) {
  detail::ByteReader r(bytes, "dataset");
  if (r.str(4) != "DMTG") throw FormatError("dataset: bad magic", 0);
  const std::uint32_t version = r.u32();
  if (version != 1) throw FormatError("dataset: unsupported version " + std::to_string(version), 4);
  Dataset d;
  const std::uint32_t n_samples = r.u32();
  d.h = static_cast<int>(r.u32());
  d.w = static_cast<int>(r.u32());
  const std::uint32_t n_tasks = r.u32();
  for (std::uint32_t i = 0; i < n_tasks; ++i) {
    TaskInfo t;
    const std::uint8_t len = r.u8();
    t.name = r.str(len);
    const std::uint8_t kind = r.u8();
    if (kind > 3) throw FormatError("dataset: bad task kind " + std::to_string(kind), r.offset() - 1);
    t.kind = static_cast<TaskKind>(kind);
    t.channels = r.u8();
    d.tasks.push_back(std::move(t));
  }
  const std::size_t px = static_cast<std::size_t>(d.h) * d.w;
  for (std::uint32_t si = 0; si < n_samples; ++si) {
    Sample s;
    std::vector<double> img(px * 3);
    for (double& v : img) v = static_cast<double>(r.f32());
    s.image = Tensor::from_data({d.h, d.w, 3}, std::move(img));
    for (const TaskInfo& t : d.tasks) {
      if (task_kind_is_integer(t.kind)) {
        std::vector<std::uint16_t> m(px);
        for (auto& v : m) v = r.u16();
        s.int_labels[t.name] = std::move(m);
      } else {
        std::vector<double> m(px * static_cast<std::size_t>(t.channels));
        for (double& v : m) v = static_cast<double>(r.f32());
        s.real_labels[t.name] = Tensor::from_data({d.h, d.w, t.channels}, std::move(m));
      }
    }
    d.samples.push_back(std::move(s));
  }
  r.expect_end();
  return d;
}

inline void write_dataset(const Dataset& d, const std::string& path) {
  detail::write_file_bytes(path, encode_dataset(d));
}

inline Dataset read_dataset(const std::string& path) {
  return decode_dataset(detail::read_file_bytes(path));
}

}  // namespace demtg

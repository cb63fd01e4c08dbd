#pragma once

// PLY reader/writer for colored, optionally labeled point clouds.
// Supports `format ascii 1.0` and `format binary_little_endian 1.0`.

#include "ou3d/binio.hpp"
#include "ou3d/scene.hpp"

#include <charconv>
#include <cstdio>
#include <map>

namespace ou3d {

namespace ply_detail {

enum class Scalar { i8, u8, i16, u16, i32, u32, f32, f64 };

inline std::optional<Scalar> scalar_from_name(std::string_view n) {
  static const std::map<std::string_view, Scalar> names = {
      {"char", Scalar::i8},     {"int8", Scalar::i8},     {"uchar", Scalar::u8},   {"uint8", Scalar::u8},
      {"short", Scalar::i16},   {"int16", Scalar::i16},   {"ushort", Scalar::u16}, {"uint16", Scalar::u16},
      {"int", Scalar::i32},     {"int32", Scalar::i32},   {"uint", Scalar::u32},   {"uint32", Scalar::u32},
      {"float", Scalar::f32},   {"float32", Scalar::f32}, {"double", Scalar::f64}, {"float64", Scalar::f64}};
  auto it = names.find(n);
  if (it == names.end()) return std::nullopt;
  return it->second;
}

inline std::size_t scalar_size(Scalar s) {
  switch (s) {
    case Scalar::i8:
    case Scalar::u8: return 1;
    case Scalar::i16:
    case Scalar::u16: return 2;
    case Scalar::i32:
    case Scalar::u32:
    case Scalar::f32: return 4;
    case Scalar::f64: return 8;
  }
  return 0;
}

inline double read_scalar(const char* p, Scalar s) {
  auto load = [p]<typename T>(T) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return static_cast<double>(v);
  };
  switch (s) {
    case Scalar::i8: return load(std::int8_t{});
    case Scalar::u8: return load(std::uint8_t{});
    case Scalar::i16: return load(std::int16_t{});
    case Scalar::u16: return load(std::uint16_t{});
    case Scalar::i32: return load(std::int32_t{});
    case Scalar::u32: return load(std::uint32_t{});
    case Scalar::f32: return load(float{});
    case Scalar::f64: return load(double{});
  }
  return 0;
}

struct Property {
  std::string name;
  Scalar type = Scalar::f32;
  bool is_list = false;
  Scalar count_type = Scalar::u8;
};

struct Element {
  std::string name;
  std::size_t count = 0;
  std::vector<Property> props;
};

struct Header {
  bool binary = false;
  std::vector<Element> elements;
  std::vector<std::string> class_names;
  std::size_t data_offset = 0;
};

inline std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    const std::size_t j = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > j) out.push_back(line.substr(j, i - j));
  }
  return out;
}

inline Header parse_header(const std::vector<char>& buf, const std::string& name) {
  Header h;
  std::size_t pos = 0;
  int line_no = 0;
  bool saw_format = false;
  auto fail = [&](const std::string& msg) -> Error {
    return Error(name + ": malformed PLY header at byte offset " + std::to_string(pos) + " (line " +
                 std::to_string(line_no) + "): " + msg);
  };
  for (;;) {
    if (pos >= buf.size()) throw fail("missing end_header");
    std::size_t eol = pos;
    while (eol < buf.size() && buf[eol] != '\n') ++eol;
    if (eol >= buf.size()) throw fail("missing end_header");
    std::string_view line(buf.data() + pos, eol - pos);
    ++line_no;
    auto tok = split_ws(line);
    if (line_no == 1) {
      if (tok.size() != 1 || tok[0] != "ply") throw fail("file does not start with 'ply'");
    } else if (tok.empty()) {
    } else if (tok[0] == "format") {
      if (tok.size() < 3 || tok[2] != "1.0") throw fail("unsupported format line");
      if (tok[1] == "ascii")
        h.binary = false;
      else if (tok[1] == "binary_little_endian")
        h.binary = true;
      else
        throw fail("unsupported format '" + std::string(tok[1]) + "'");
      saw_format = true;
    } else if (tok[0] == "comment" || tok[0] == "obj_info") {
      if (tok.size() >= 4 && tok[0] == "comment" && tok[1] == "class") {
        std::size_t id = 0;
        auto [p, ec] = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), id);
        if (ec == std::errc() && id == h.class_names.size()) {
          const auto name_start = tok[3].data() - line.data();
          std::string cls(line.substr(static_cast<std::size_t>(name_start)));
          while (!cls.empty() && (cls.back() == '\r' || cls.back() == ' ')) cls.pop_back();
          h.class_names.push_back(cls);
        }
      }
    } else if (tok[0] == "element") {
      if (tok.size() != 3) throw fail("bad element line");
      Element e;
      e.name = tok[1];
      auto [p, ec] = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), e.count);
      if (ec != std::errc()) throw fail("bad element count");
      h.elements.push_back(std::move(e));
    } else if (tok[0] == "property") {
      if (h.elements.empty()) throw fail("property before any element");
      Property pr;
      if (tok.size() == 5 && tok[1] == "list") {
        auto ct = scalar_from_name(tok[2]);
        auto it = scalar_from_name(tok[3]);
        if (!ct || !it) throw fail("unknown list property type");
        pr.is_list = true;
        pr.count_type = *ct;
        pr.type = *it;
        pr.name = tok[4];
      } else if (tok.size() == 3) {
        auto t = scalar_from_name(tok[1]);
        if (!t) throw fail("unknown property type '" + std::string(tok[1]) + "'");
        pr.type = *t;
        pr.name = tok[2];
      } else {
        throw fail("bad property line");
      }
      h.elements.back().props.push_back(std::move(pr));
    } else if (tok[0] == "end_header") {
      h.data_offset = eol + 1;
      break;
    } else {
      throw fail("unknown keyword '" + std::string(tok[0]) + "'");
    }
    pos = eol + 1;
  }
  if (!saw_format) throw Error(name + ": malformed PLY header: missing format line");
  return h;
}

}  // namespace ply_detail

inline PointCloud parse_ply(const std::vector<char>& buf, const std::string& name = "<ply>") {
  using namespace ply_detail;
  const Header h = parse_header(buf, name);

  const Element* vertex = nullptr;
  for (const auto& e : h.elements)
    if (e.name == "vertex") vertex = &e;
  if (!vertex) throw Error(name + ": PLY has no 'vertex' element");

  int ix = -1, iy = -1, iz = -1, ir = -1, ig = -1, ib = -1, il = -1;
  for (std::size_t k = 0; k < vertex->props.size(); ++k) {
    const auto& pr = vertex->props[k];
    const int kk = static_cast<int>(k);
    if (pr.is_list) {
      warn(name + ": skipping list property '" + pr.name + "'");
      continue;
    }
    if (pr.name == "x") ix = kk;
    else if (pr.name == "y") iy = kk;
    else if (pr.name == "z") iz = kk;
    else if (pr.name == "red" || pr.name == "r") ir = kk;
    else if (pr.name == "green" || pr.name == "g") ig = kk;
    else if (pr.name == "blue" || pr.name == "b") ib = kk;
    else if (pr.name == "label" || pr.name == "class") il = kk;
    else warn(name + ": skipping unknown vertex property '" + pr.name + "'");
  }
  if (ix < 0) throw Error(name + ": PLY vertex element is missing property 'x'");
  if (iy < 0) throw Error(name + ": PLY vertex element is missing property 'y'");
  if (iz < 0) throw Error(name + ": PLY vertex element is missing property 'z'");
  const bool has_color = ir >= 0 && ig >= 0 && ib >= 0;

  PointCloud cloud;
  cloud.class_names = h.class_names;
  const std::size_t n = vertex->count;
  cloud.positions.resize(n);
  cloud.colors.assign(n, Rgb{128, 128, 128});
  if (il >= 0) cloud.labels.resize(n);

  std::vector<double> vals(vertex->props.size());
  auto store = [&](std::size_t i) {
    const Vec3 p(vals[ix], vals[iy], vals[iz]);
    if (!p.allFinite()) throw Error(name + ": non-finite coordinate at vertex element index " + std::to_string(i));
    cloud.positions[i] = p;
    if (has_color)
      cloud.colors[i] = {static_cast<std::uint8_t>(vals[ir]), static_cast<std::uint8_t>(vals[ig]),
                         static_cast<std::uint8_t>(vals[ib])};
    if (il >= 0) cloud.labels[i] = static_cast<std::int32_t>(vals[il]);
  };

  if (h.binary) {
    std::size_t pos = h.data_offset;
    auto need = [&](std::size_t bytes, const std::string& what) {
      if (buf.size() - pos < bytes)
        throw Error(name + ": truncated PLY payload at byte offset " + std::to_string(pos) + " while reading " + what);
    };
    for (const auto& e : h.elements) {
      const bool is_vertex = &e == vertex;
      for (std::size_t i = 0; i < e.count; ++i) {
        for (std::size_t k = 0; k < e.props.size(); ++k) {
          const auto& pr = e.props[k];
          const std::string what = e.name + "[" + std::to_string(i) + "]." + pr.name;
          if (pr.is_list) {
            need(scalar_size(pr.count_type), what);
            const auto cnt = static_cast<std::size_t>(read_scalar(buf.data() + pos, pr.count_type));
            pos += scalar_size(pr.count_type);
            need(cnt * scalar_size(pr.type), what);
            pos += cnt * scalar_size(pr.type);
          } else {
            need(scalar_size(pr.type), what);
            vals[k] = read_scalar(buf.data() + pos, pr.type);
            pos += scalar_size(pr.type);
          }
        }
        if (is_vertex) store(i);
      }
      if (is_vertex) break;
    }
  } else {
    std::size_t pos = h.data_offset;
    auto next_line = [&](const std::string& what) {
      while (pos < buf.size() && (buf[pos] == '\n' || buf[pos] == '\r')) ++pos;
      if (pos >= buf.size())
        throw Error(name + ": truncated PLY payload at byte offset " + std::to_string(pos) + " while reading " + what);
      std::size_t eol = pos;
      while (eol < buf.size() && buf[eol] != '\n') ++eol;
      std::string_view line(buf.data() + pos, eol - pos);
      const std::size_t at = pos;
      pos = eol;
      return std::pair{line, at};
    };
    for (const auto& e : h.elements) {
      const bool is_vertex = &e == vertex;
      for (std::size_t i = 0; i < e.count; ++i) {
        auto [line, at] = next_line(e.name + "[" + std::to_string(i) + "]");
        if (!is_vertex) continue;
        auto tok = split_ws(line);
        std::size_t t = 0;
        for (std::size_t k = 0; k < e.props.size(); ++k) {
          const auto& pr = e.props[k];
          auto parse = [&](double& out) {
            if (t >= tok.size())
              throw Error(name + ": truncated PLY vertex line at byte offset " + std::to_string(at) +
                          " (element index " + std::to_string(i) + ")");
            const std::string s(tok[t++]);
            char* end = nullptr;
            out = std::strtod(s.c_str(), &end);
            if (end == s.c_str() || *end != '\0')
              throw Error(name + ": unparsable value '" + s + "' at byte offset " + std::to_string(at) +
                          " (element index " + std::to_string(i) + ")");
          };
          if (pr.is_list) {
            double cnt = 0;
            parse(cnt);
            double dummy;
            for (int c = 0; c < static_cast<int>(cnt); ++c) parse(dummy);
          } else {
            parse(vals[k]);
            if (pr.type == Scalar::f32) vals[k] = static_cast<float>(vals[k]);
          }
        }
        store(i);
      }
      if (is_vertex) break;
    }
  }
  if (cloud.has_labels()) {
    for (std::size_t i = 0; i < cloud.labels.size(); ++i)
      if (cloud.labels[i] < 0 ||
          (!cloud.class_names.empty() && static_cast<std::size_t>(cloud.labels[i]) >= cloud.class_names.size()))
        throw Error(name + ": label out of range at vertex element index " + std::to_string(i));
  }
  if (cloud.positions.empty()) throw Error(name + ": PLY has zero vertices");
  return cloud;
}

inline PointCloud load_cloud(const std::filesystem::path& path) {
  return parse_ply(binio::slurp(path), path.string());
}

enum class PlyFormat { Ascii, BinaryLittleEndian };

// Coordinates are written as float32 unless `double_coords` is set.
inline std::vector<char> format_ply(const PointCloud& cloud, PlyFormat format, bool double_coords = false) {
  const bool labels = cloud.has_labels();
  std::string header = "ply\n";
  header += format == PlyFormat::Ascii ? "format ascii 1.0\n" : "format binary_little_endian 1.0\n";
  for (std::size_t c = 0; c < cloud.class_names.size(); ++c)
    header += "comment class " + std::to_string(c) + " " + cloud.class_names[c] + "\n";
  header += "element vertex " + std::to_string(cloud.size()) + "\n";
  const char* ct = double_coords ? "double" : "float";
  for (const char* a : {"x", "y", "z"}) header += std::string("property ") + ct + " " + a + "\n";
  header += "property uchar red\nproperty uchar green\nproperty uchar blue\n";
  if (labels) header += "property int label\n";
  header += "end_header\n";

  binio::Writer w;
  w.bytes(header.data(), header.size());
  if (format == PlyFormat::BinaryLittleEndian) {
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      for (int a = 0; a < 3; ++a) {
        if (double_coords)
          w.put<double>(cloud.positions[i][a]);
        else
          w.put<float>(static_cast<float>(cloud.positions[i][a]));
      }
      w.bytes(cloud.colors[i].data(), 3);
      if (labels) w.put<std::int32_t>(cloud.labels[i]);
    }
  } else {
    char line[160];
    for (std::size_t i = 0; i < cloud.size(); ++i) {
      const auto& p = cloud.positions[i];
      const auto& c = cloud.colors[i];
      int n = double_coords ? std::snprintf(line, sizeof line, "%.17g %.17g %.17g %u %u %u", p.x(), p.y(), p.z(),
                                            c[0], c[1], c[2])
                            : std::snprintf(line, sizeof line, "%.9g %.9g %.9g %u %u %u", double(float(p.x())),
                                            double(float(p.y())), double(float(p.z())), c[0], c[1], c[2]);
      w.bytes(line, static_cast<std::size_t>(n));
      if (labels) {
        n = std::snprintf(line, sizeof line, " %d", cloud.labels[i]);
        w.bytes(line, static_cast<std::size_t>(n));
      }
      w.bytes("\n", 1);
    }
  }
  return w.data();
}

inline void write_cloud(const std::filesystem::path& path, const PointCloud& cloud,
                        PlyFormat format = PlyFormat::BinaryLittleEndian, bool double_coords = false) {
  binio::Writer w;
  const auto bytes = format_ply(cloud, format, double_coords);
  w.bytes(bytes.data(), bytes.size());
  w.save(path);
}

}  // namespace ou3d

#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "autoshard/tables.hpp"

// Workload container: a line-oriented text header followed by raw
// little-endian 64-bit arrays. Layout (tables in ascending id order):
//
//   autoshard-workload 1
//   batch_size <N>
//   tables <T>
//   table <id> <dim> <hash_size> <pooling_mean> <access_ratio> <bytes_per_param>
//   ... (T lines)
//   end_header
//   repeat T times, ascending id:
//     u64 n_offsets, i64 offsets[n_offsets], u64 n_indices, i64 indices[n_indices]
//
// The pool file is the header-only variant with magic "autoshard-pool".

namespace autoshard {

namespace detail {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline void write_i64(std::ostream& os, std::int64_t v) {
  write_u64(os, static_cast<std::uint64_t>(v));
}

inline std::uint64_t read_u64(std::istream& is, const std::string& what) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8))
    throw ParseError("truncated file while reading " + what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::int64_t read_i64(std::istream& is, const std::string& what) {
  return static_cast<std::int64_t>(read_u64(is, what));
}

// Shortest-round-trip double formatting for header lines.
inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::string table_header_line(const TableDesc& t) {
  std::ostringstream os;
  os << "table " << t.id << ' ' << t.dim << ' ' << t.hash_size << ' '
     << format_double(t.pooling_mean) << ' ' << format_double(t.access_ratio)
     << ' ' << t.bytes_per_param;
  return os.str();
}

inline TableDesc parse_table_header_line(const std::string& line) {
  std::istringstream is(line);
  std::string tag;
  TableDesc t;
  if (!(is >> tag >> t.id >> t.dim >> t.hash_size >> t.pooling_mean >>
        t.access_ratio >> t.bytes_per_param) ||
      tag != "table")
    throw ParseError("malformed table header line: '" + line + "'");
  if (t.dim < 1 || t.hash_size < 1 || t.bytes_per_param < 1)
    throw ParseError("table " + std::to_string(t.id) +
                     ": non-positive dim/hash_size/bytes_per_param");
  return t;
}

inline std::string read_line(std::istream& is, const std::string& what) {
  std::string line;
  if (!std::getline(is, line))
    throw ParseError("truncated file while reading " + what);
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pool files
// ---------------------------------------------------------------------------

inline void save_pool(std::ostream& os, const std::vector<TableDesc>& pool) {
  os << "autoshard-pool 1\n";
  os << "tables " << pool.size() << "\n";
  for (const auto& t : pool) os << detail::table_header_line(t) << "\n";
  os << "end_header\n";
  if (!os) throw ParseError("failed writing pool stream");
}

inline std::vector<TableDesc> load_pool(std::istream& is) {
  std::string magic = detail::read_line(is, "pool magic");
  if (magic != "autoshard-pool 1")
    throw ParseError("bad pool magic/version: '" + magic + "'");
  std::istringstream tl(detail::read_line(is, "pool table count"));
  std::string tag;
  std::size_t count = 0;
  if (!(tl >> tag >> count) || tag != "tables")
    throw ParseError("malformed pool table count line");
  std::vector<TableDesc> pool;
  pool.reserve(count);
  int last_id = -1;
  for (std::size_t i = 0; i < count; ++i) {
    TableDesc t =
        detail::parse_table_header_line(detail::read_line(is, "pool table"));
    if (t.id <= last_id)
      throw ParseError("table " + std::to_string(t.id) +
                       ": ids must be strictly ascending");
    last_id = t.id;
    pool.push_back(t);
  }
  if (detail::read_line(is, "pool end_header") != "end_header")
    throw ParseError("missing end_header in pool file");
  return pool;
}

inline void save_pool_file(const std::string& path,
                           const std::vector<TableDesc>& pool) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  save_pool(os, pool);
}

inline std::vector<TableDesc> load_pool_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open: " + path);
  return load_pool(is);
}

// ---------------------------------------------------------------------------
// Workload files
// ---------------------------------------------------------------------------

/// Table metadata embedded in a workload header (enough to validate streams
/// and re-derive features without the original pool file).
inline void save_workload(std::ostream& os, const Workload& wl,
                          const std::vector<TableDesc>& tables) {
  if (tables.size() != wl.per_table.size())
    throw ConfigError("save_workload: table metadata must match streams");
  os << "autoshard-workload 1\n";
  os << "batch_size " << wl.batch_size << "\n";
  os << "tables " << wl.per_table.size() << "\n";
  for (std::size_t i = 0; i < wl.per_table.size(); ++i) {
    if (tables[i].id != wl.per_table[i].table_id)
      throw ConfigError("save_workload: metadata order must match streams");
    os << detail::table_header_line(tables[i]) << "\n";
  }
  os << "end_header\n";
  for (const auto& s : wl.per_table) {
    detail::write_u64(os, s.offsets.size());
    for (auto v : s.offsets) detail::write_i64(os, v);
    detail::write_u64(os, s.indices.size());
    for (auto v : s.indices) detail::write_i64(os, v);
  }
  if (!os) throw ParseError("failed writing workload stream");
}

struct LoadedWorkload {
  Workload workload;
  std::vector<TableDesc> tables;
};

inline LoadedWorkload load_workload(std::istream& is) {
  std::string magic = detail::read_line(is, "workload magic");
  if (magic != "autoshard-workload 1")
    throw ParseError("bad workload magic/version: '" + magic + "'");

  LoadedWorkload out;
  {
    std::istringstream bl(detail::read_line(is, "batch_size"));
    std::string tag;
    if (!(bl >> tag >> out.workload.batch_size) || tag != "batch_size" ||
        out.workload.batch_size < 1)
      throw ParseError("malformed batch_size line");
  }
  std::size_t count = 0;
  {
    std::istringstream tl(detail::read_line(is, "table count"));
    std::string tag;
    if (!(tl >> tag >> count) || tag != "tables")
      throw ParseError("malformed tables count line");
  }
  int last_id = -1;
  for (std::size_t i = 0; i < count; ++i) {
    TableDesc t =
        detail::parse_table_header_line(detail::read_line(is, "table header"));
    if (t.id <= last_id)
      throw ParseError("table " + std::to_string(t.id) +
                       ": ids must be strictly ascending");
    last_id = t.id;
    out.tables.push_back(t);
  }
  if (detail::read_line(is, "end_header") != "end_header")
    throw ParseError("missing end_header in workload file");

  for (std::size_t i = 0; i < count; ++i) {
    const TableDesc& t = out.tables[i];
    const std::string where = "table " + std::to_string(t.id);
    TableStream s;
    s.table_id = t.id;
    const std::uint64_t n_off = detail::read_u64(is, where + " offset count");
    if (n_off != static_cast<std::uint64_t>(out.workload.batch_size) + 1)
      throw OffsetError(where + ": offsets length " + std::to_string(n_off) +
                        " != batch_size + 1");
    s.offsets.resize(n_off);
    for (auto& v : s.offsets) v = detail::read_i64(is, where + " offsets");
    if (s.offsets.front() != 0)
      throw OffsetError(where + ": offsets must start at 0, got " +
                        std::to_string(s.offsets.front()));
    for (std::size_t q = 1; q < s.offsets.size(); ++q)
      if (s.offsets[q] < s.offsets[q - 1])
        throw OffsetError(where + ": offsets must be nondecreasing at entry " +
                          std::to_string(q));
    const std::uint64_t n_idx = detail::read_u64(is, where + " index count");
    if (static_cast<std::int64_t>(n_idx) != s.offsets.back())
      throw OffsetError(where + ": final offset " +
                        std::to_string(s.offsets.back()) +
                        " != index count " + std::to_string(n_idx));
    s.indices.resize(n_idx);
    for (auto& v : s.indices) {
      v = detail::read_i64(is, where + " indices");
      if (v < 0 || v >= t.hash_size)
        throw IndexError(where + ": index " + std::to_string(v) +
                         " out of range [0, " + std::to_string(t.hash_size) +
                         ")");
    }
    out.workload.per_table.push_back(std::move(s));
  }
  return out;
}

inline void save_workload_file(const std::string& path, const Workload& wl,
                               const std::vector<TableDesc>& tables) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ParseError("cannot open for writing: " + path);
  save_workload(os, wl, tables);
}

inline LoadedWorkload load_workload_file(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ParseError("cannot open: " + path);
  return load_workload(is);
}

}  // namespace autoshard

#pragma once

// Sample CSV files and the binary estimator format.
//
// CSV: header `x1,...,xd`, one sample per line, values printed with 17
// significant digits so a write/read cycle is exact.
//
// Estimator file (all integers and floats little-endian):
//
//   bytes  field
//   4      magic "SKSE"
//   u32    format version (1)
//   u8     kernel kind        0 = diagonal, 1 = curl-free
//   u8     kernel family      0 = IMQ, 1 = Gaussian
//   f64    bandwidth
//   u8     scheme tag         0 tikhonov, 1 truncated tikhonov, 2 spectral cut-off,
//                             3 landweber, 4 nu-method, 5 custom filter
//   f64 x2 scheme parameters  (lambda, 0) | (lambda, 0) | (threshold, rank) |
//                             (step, iterations) | (nu, iterations) | (0, 0)
//   u32    name length, then that many bytes (custom filter name, else 0)
//   u64    M, u64 d, then M*d f64 samples, row-major
//   u64    N, then N*d f64 expansion centers, row-major
//   f64    offset a
//   u64    coefficient count (N*d), then the coefficients
//   u64    subset size, then that many u64 sample indices

#include <bit>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scorekit/errors.hpp"
#include "scorekit/estimators.hpp"
#include "scorekit/kernels.hpp"

namespace scorekit {

inline constexpr std::uint32_t kEstimatorFormatVersion = 1;

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_csv(std::ostream& out, const RowMatrix& rows, const std::vector<std::string>& header) {
  for (std::size_t i = 0; i < header.size(); ++i) out << (i ? "," : "") << header[i];
  out << '\n';
  for (Index r = 0; r < rows.rows(); ++r) {
    for (Index c = 0; c < rows.cols(); ++c) out << (c ? "," : "") << format_double(rows(r, c));
    out << '\n';
  }
}

inline std::vector<std::string> numbered_header(const std::string& prefix, Index d) {
  std::vector<std::string> h;
  for (Index i = 1; i <= d; ++i) h.push_back(prefix + std::to_string(i));
  return h;
}

inline void write_samples_csv(std::ostream& out, const RowMatrix& rows) {
  write_csv(out, rows, numbered_header("x", rows.cols()));
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::stringstream ss(line);
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline double parse_double(const std::string& s, std::size_t line) {
  std::size_t used = 0;
  double v = 0.0;
  try {
    v = std::stod(s, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  while (used < s.size() && (s[used] == ' ' || s[used] == '\r')) ++used;
  if (used == 0 || used != s.size()) {
    throw InputError("line " + std::to_string(line) + ": cannot parse number '" + s + "'");
  }
  return v;
}

}  // namespace detail

/// Reads a header row plus numeric rows; every row must have the header's width.
inline RowMatrix read_numeric_csv(std::istream& in) {
  std::string line;
  std::size_t line_no = 0;
  std::size_t width = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    width = detail::split_csv_line(line).size();
    break;
  }
  if (width == 0) throw InputError("CSV file has no header row");
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != width) {
      throw InputError("line " + std::to_string(line_no) + ": expected " + std::to_string(width) + " columns, got " +
                       std::to_string(cells.size()));
    }
    for (const auto& c : cells) values.push_back(detail::parse_double(c, line_no));
    ++rows;
  }
  RowMatrix out(static_cast<Index>(rows), static_cast<Index>(width));
  for (std::size_t i = 0; i < values.size(); ++i) out.data()[i] = values[i];
  return out;
}

inline SampleMatrix read_samples_csv(std::istream& in) { return SampleMatrix(read_numeric_csv(in)); }

inline RowMatrix read_csv_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path);
  return read_numeric_csv(in);
}

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <class T>
void put_le(std::ostream& out, T value) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                                                   std::uint8_t>>;
  const U bits = std::bit_cast<U>(value);
  for (std::size_t i = 0; i < sizeof(U); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

template <class T>
T get_le(std::istream& in) {
  using U = std::conditional_t<sizeof(T) == 8, std::uint64_t, std::conditional_t<sizeof(T) == 4, std::uint32_t,
                                                                                   std::uint8_t>>;
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    const int c = in.get();
    if (c == std::char_traits<char>::eof()) throw InputError("estimator file is truncated");
    bits |= static_cast<U>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return std::bit_cast<T>(bits);
}

inline void put_matrix(std::ostream& out, const RowMatrix& m) {
  for (Index i = 0; i < m.size(); ++i) put_le<double>(out, m.data()[i]);
}

inline std::uint64_t get_count(std::istream& in, std::uint64_t limit, const char* what) {
  const auto n = get_le<std::uint64_t>(in);
  if (n > limit) throw InputError(std::string("estimator file: implausible ") + what);
  return n;
}

}  // namespace detail

inline void write_estimator(std::ostream& out, const FittedScoreEstimator& est) {
  out.write("SKSE", 4);
  detail::put_le<std::uint32_t>(out, kEstimatorFormatVersion);
  detail::put_le<std::uint8_t>(out, est.kernel().kind == KernelKind::Diagonal ? 0 : 1);
  detail::put_le<std::uint8_t>(out, est.kernel().scalar.family() == KernelFamily::IMQ ? 0 : 1);
  detail::put_le<double>(out, est.kernel().scalar.bandwidth());
  double p0 = 0.0;
  double p1 = 0.0;
  std::string name;
  std::visit(
      [&](const auto& s) {
        using S = std::decay_t<decltype(s)>;
        if constexpr (std::is_same_v<S, Tikhonov> || std::is_same_v<S, TruncatedTikhonov>) {
          p0 = s.lambda;
        } else if constexpr (std::is_same_v<S, SpectralCutoff>) {
          p0 = s.threshold;
          p1 = static_cast<double>(s.rank);
        } else if constexpr (std::is_same_v<S, Landweber>) {
          p0 = s.step;
          p1 = s.iterations;
        } else if constexpr (std::is_same_v<S, NuMethod>) {
          p0 = s.nu;
          p1 = s.iterations;
        } else {
          name = s.name;
        }
      },
      est.scheme());
  detail::put_le<std::uint8_t>(out, static_cast<std::uint8_t>(est.scheme().index()));
  detail::put_le<double>(out, p0);
  detail::put_le<double>(out, p1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(est.samples().size()));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(est.dim()));
  detail::put_matrix(out, est.samples().data());
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(est.centers().rows()));
  detail::put_matrix(out, est.centers());
  detail::put_le<double>(out, est.offset());
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(est.coefficients().size()));
  for (Index i = 0; i < est.coefficients().size(); ++i) detail::put_le<double>(out, est.coefficients()(i));
  detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(est.subset().size()));
  for (Index i : est.subset()) detail::put_le<std::uint64_t>(out, static_cast<std::uint64_t>(i));
}

inline FittedScoreEstimator read_estimator(std::istream& in) {
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::string(magic, 4) != "SKSE") throw InputError("not an estimator file (bad magic)");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kEstimatorFormatVersion) {
    throw InputError("unsupported estimator format version " + std::to_string(version));
  }
  const auto kind = detail::get_le<std::uint8_t>(in);
  const auto family = detail::get_le<std::uint8_t>(in);
  if (kind > 1 || family > 1) throw InputError("estimator file: unknown kernel");
  const double bandwidth = detail::get_le<double>(in);
  const MatrixKernelSpec spec{kind == 0 ? KernelKind::Diagonal : KernelKind::CurlFree,
                              ScalarRadialKernel(family == 0 ? KernelFamily::IMQ : KernelFamily::Gaussian, bandwidth)};
  const auto tag = detail::get_le<std::uint8_t>(in);
  const double p0 = detail::get_le<double>(in);
  const double p1 = detail::get_le<double>(in);
  const auto name_len = detail::get_le<std::uint32_t>(in);
  if (name_len > 4096) throw InputError("estimator file: implausible name length");
  std::string name(name_len, '\0');
  in.read(name.data(), name_len);
  RegularizerSpec scheme = Tikhonov{p0};
  switch (tag) {
    case 0: scheme = Tikhonov{p0}; break;
    case 1: scheme = TruncatedTikhonov{p0}; break;
    case 2: scheme = SpectralCutoff{p0, static_cast<Index>(p1)}; break;
    case 3: scheme = Landweber{p0, static_cast<int>(p1)}; break;
    case 4: scheme = NuMethod{p0, static_cast<int>(p1)}; break;
    case 5: scheme = CustomFilter{name, {}}; break;
    default: throw InputError("estimator file: unknown scheme tag " + std::to_string(tag));
  }
  constexpr std::uint64_t kLimit = std::uint64_t{1} << 40;
  const auto m = detail::get_count(in, kLimit, "sample count");
  const auto d = detail::get_count(in, kLimit, "dimension");
  RowMatrix x(static_cast<Index>(m), static_cast<Index>(d));
  for (Index i = 0; i < x.size(); ++i) x.data()[i] = detail::get_le<double>(in);
  const auto n = detail::get_count(in, kLimit, "center count");
  RowMatrix z(static_cast<Index>(n), static_cast<Index>(d));
  for (Index i = 0; i < z.size(); ++i) z.data()[i] = detail::get_le<double>(in);
  const double offset = detail::get_le<double>(in);
  const auto nc = detail::get_count(in, kLimit, "coefficient count");
  Vector c(static_cast<Index>(nc));
  for (Index i = 0; i < c.size(); ++i) c(i) = detail::get_le<double>(in);
  const auto ns = detail::get_count(in, m, "subset size");
  std::vector<Index> subset(ns);
  for (auto& i : subset) {
    i = static_cast<Index>(detail::get_le<std::uint64_t>(in));
    if (i < 0 || static_cast<std::uint64_t>(i) >= m) throw InputError("estimator file: subset index out of range");
  }
  return {spec, SampleMatrix(std::move(x)), std::move(z), std::move(c), offset, std::move(scheme), std::move(subset)};
}

inline void save_estimator(const std::string& path, const FittedScoreEstimator& est) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  write_estimator(out, est);
}

inline FittedScoreEstimator load_estimator(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return read_estimator(in);
}

}  // namespace scorekit

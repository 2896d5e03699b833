#include "stcov/tensor.hpp"

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace stcov {

namespace {

void put_u64le(std::ostream& os, std::uint64_t v) {
  unsigned char buf[8];
  for (int i = 0; i < 8; ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(buf), 8);
}

bool get_u64le(std::istream& is, std::uint64_t& v) {
  unsigned char buf[8];
  if (!is.read(reinterpret_cast<char*>(buf), 8)) return false;
  v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
  return true;
}

void put_f64le(std::ostream& os, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64le(os, bits);
}

bool get_f64le(std::istream& is, double& d) {
  std::uint64_t bits;
  if (!get_u64le(is, bits)) return false;
  std::memcpy(&d, &bits, 8);
  return true;
}

constexpr std::uint64_t kMaxElements = 1ull << 32;  // 32 GiB of doubles is already absurd here

}  // namespace

Vector FrameTensor::clip(int start_frame, int n_frames) const {
  if (start_frame < 0 || start_frame + n_frames > frames)
    throw BadInputError("FrameTensor::clip: frame range out of bounds");
  const int n = pixels();
  Vector out(static_cast<Eigen::Index>(n) * n_frames);
  for (int f = 0; f < n_frames; ++f)
    for (int p = 0; p < n; ++p)
      out[static_cast<Eigen::Index>(f) * n + p] =
          data[(static_cast<std::size_t>(start_frame) + f) * n + p];
  return out;
}

Vector FrameTensor::block_clip(int start_frame, int n_frames, int r0, int c0, int bh,
                               int bw) const {
  if (r0 < 0 || c0 < 0 || r0 + bh > height || c0 + bw > width)
    throw BadInputError("FrameTensor::block_clip: block out of bounds");
  if (start_frame < 0 || start_frame + n_frames > frames)
    throw BadInputError("FrameTensor::block_clip: frame range out of bounds");
  Vector out(static_cast<Eigen::Index>(bh) * bw * n_frames);
  Eigen::Index k = 0;
  for (int f = 0; f < n_frames; ++f)
    for (int r = 0; r < bh; ++r)
      for (int c = 0; c < bw; ++c) out[k++] = at(start_frame + f, r0 + r, c0 + c);
  return out;
}

FrameTensor FrameTensor::cropped(int top, int left, int bottom, int right) const {
  const int nh = height - top - bottom, nw = width - left - right;
  if (nh < 1 || nw < 1) throw BadInputError("FrameTensor::cropped: crop leaves no pixels");
  FrameTensor out(nh, nw, frames);
  out.provenance = provenance;
  for (int f = 0; f < frames; ++f)
    for (int r = 0; r < nh; ++r)
      for (int c = 0; c < nw; ++c) out.at(f, r, c) = at(f, top + r, left + c);
  return out;
}

FrameTensor FrameTensor::reversed() const {
  FrameTensor out(height, width, frames);
  out.provenance = provenance + " (reversed)";
  const int n = pixels();
  for (int f = 0; f < frames; ++f)
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(frames - 1 - f) * n, n,
                out.data.begin() + static_cast<std::ptrdiff_t>(f) * n);
  return out;
}

FrameTensor read_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("sten: cannot open '" + path + "'");
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "STEN", 4) != 0)
    throw FormatError("sten: bad magic");
  char version = 0, ndim = 0;
  if (!is.get(version) || version != 0x01) throw FormatError("sten: unsupported version");
  if (!is.get(ndim) || ndim != 3) throw FormatError("sten: expected 3 dimensions");
  std::uint64_t dims[3];
  for (auto& d : dims)
    if (!get_u64le(is, d)) throw FormatError("sten: truncated header");
  const std::uint64_t total = dims[0] * dims[1] * dims[2];
  if (dims[0] == 0 || dims[1] == 0 || dims[2] == 0 || total > kMaxElements ||
      dims[0] > kMaxElements || dims[1] > kMaxElements || dims[2] > kMaxElements)
    throw FormatError("sten: dim overflow");
  FrameTensor t(static_cast<int>(dims[0]), static_cast<int>(dims[1]),
                static_cast<int>(dims[2]));
  t.provenance = path;
  for (std::uint64_t i = 0; i < total; ++i)
    if (!get_f64le(is, t.data[i])) throw FormatError("sten: truncated payload");
  return t;
}

void write_tensor(const FrameTensor& t, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("sten: cannot write '" + path + "'");
  os.write("STEN", 4);
  os.put(0x01);
  os.put(3);
  put_u64le(os, static_cast<std::uint64_t>(t.height));
  put_u64le(os, static_cast<std::uint64_t>(t.width));
  put_u64le(os, static_cast<std::uint64_t>(t.frames));
  for (double d : t.data) put_f64le(os, d);
  if (!os) throw FormatError("sten: write failed");
}

namespace {

void read_pgm(const std::string& path, int* height, int* width,
              std::vector<double>* pixels) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("pgm: cannot open '" + path + "'");
  std::string magic;
  is >> magic;
  if (magic != "P5" && magic != "P2") throw FormatError("pgm: bad magic in '" + path + "'");
  auto next_token = [&is, &path]() {
    std::string tok;
    for (;;) {
      if (!(is >> tok)) throw FormatError("pgm: truncated header in '" + path + "'");
      if (tok[0] == '#') {
        std::string rest;
        std::getline(is, rest);
        continue;
      }
      return tok;
    }
  };
  const int w = std::stoi(next_token());
  const int h = std::stoi(next_token());
  const int maxval = std::stoi(next_token());
  if (maxval < 1 || maxval > 255) throw FormatError("pgm: only 8-bit frames supported");
  pixels->resize(static_cast<std::size_t>(w) * h);
  if (magic == "P5") {
    is.get();  // single whitespace after maxval
    std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
      throw FormatError("pgm: truncated payload in '" + path + "'");
    for (std::size_t i = 0; i < raw.size(); ++i)
      (*pixels)[i] = static_cast<double>(raw[i]) / static_cast<double>(maxval);
  } else {
    for (auto& px : *pixels) {
      int v;
      if (!(is >> v)) throw FormatError("pgm: truncated payload in '" + path + "'");
      px = static_cast<double>(v) / static_cast<double>(maxval);
    }
  }
  *height = h;
  *width = w;
}

}  // namespace

FrameTensor import_pgm_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  std::vector<std::string> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string ext = entry.path().extension().string();
    if (ext == ".pgm" || ext == ".PGM") files.push_back(entry.path().string());
  }
  if (files.empty()) throw BadInputError("import_pgm_dir: no .pgm files in '" + dir + "'");
  std::sort(files.begin(), files.end());

  FrameTensor t;
  for (std::size_t f = 0; f < files.size(); ++f) {
    int h = 0, w = 0;
    std::vector<double> pixels;
    read_pgm(files[f], &h, &w, &pixels);
    if (f == 0) {
      t = FrameTensor(h, w, static_cast<int>(files.size()));
      t.provenance = dir;
    } else if (h != t.height || w != t.width) {
      throw FormatError("import_pgm_dir: frame size mismatch in '" + files[f] + "'");
    }
    std::copy(pixels.begin(), pixels.end(),
              t.data.begin() + static_cast<std::ptrdiff_t>(f) * t.pixels());
  }
  return t;
}

std::vector<int> read_labels(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("labels: cannot open '" + path + "'");
  std::vector<int> labels;
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line.rfind("frame", 0) == 0) continue;
    }
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("labels: malformed row '" + line + "'");
    const int frame = std::stoi(line.substr(0, comma));
    const int label = std::stoi(line.substr(comma + 1));
    if (frame != static_cast<int>(labels.size()))
      throw FormatError("labels: non-consecutive frame index");
    labels.push_back(label);
  }
  return labels;
}

void write_labels(const std::vector<int>& labels, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw FormatError("labels: cannot write '" + path + "'");
  os << "frame,label\n";
  for (std::size_t f = 0; f < labels.size(); ++f) os << f << "," << labels[f] << "\n";
}

}  // namespace stcov

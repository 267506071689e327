#include "promptmed/data/io.hpp"

#include <png.h>
#include <tiffio.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>
#include <fstream>

#include "promptmed/core/errors.hpp"

namespace promptmed {

namespace fs = std::filesystem;

namespace {

// ---- NIfTI-1 ----

constexpr int kHeaderSize = 348;
constexpr int kDataOffset = 352;

struct RawHeader {
  std::vector<std::uint8_t> b = std::vector<std::uint8_t>(kDataOffset, 0);
  bool swap = false;

  template <class T>
  T get(int off) const {
    T v;
    std::memcpy(&v, b.data() + off, sizeof v);
    if (swap) {
      auto* p = reinterpret_cast<std::uint8_t*>(&v);
      std::reverse(p, p + sizeof v);
    }
    return v;
  }
  template <class T>
  void put(int off, T v) {
    std::memcpy(b.data() + off, &v, sizeof v);
  }
};

bool ends_with_gz(const fs::path& p) { return p.extension() == ".gz"; }

std::vector<std::uint8_t> read_all_maybe_gz(const fs::path& path) {
  if (!fs::exists(path)) throw IoError(path.string(), "file not found");
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError(path.string(), "cannot open");
  std::vector<std::uint8_t> out;
  std::uint8_t buf[1 << 16];
  int n;
  while ((n = gzread(f, buf, sizeof buf)) > 0) out.insert(out.end(), buf, buf + n);
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw IoError(path.string(), "decompression failed");
  return out;
}

void write_all_maybe_gz(const fs::path& path, const std::vector<std::uint8_t>& bytes) {
  if (ends_with_gz(path)) {
    gzFile f = gzopen(path.c_str(), "wb6");
    if (!f) throw IoError(path.string(), "cannot open for writing");
    std::size_t done = 0;
    while (done < bytes.size()) {
      const auto chunk = static_cast<unsigned>(std::min<std::size_t>(bytes.size() - done, 1u << 20));
      if (gzwrite(f, bytes.data() + done, chunk) != static_cast<int>(chunk)) {
        gzclose(f);
        throw IoError(path.string(), "write failed");
      }
      done += chunk;
    }
    if (gzclose(f) != Z_OK) throw IoError(path.string(), "write failed");
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError(path.string(), "cannot open for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(path.string(), "write failed");
}

// Direction sign of each voxel axis (x, y, z); throws on non-axis-aligned frames.
std::array<int, 3> axis_signs(const RawHeader& h, const std::string& path) {
  double m[3][3];
  const short sform = h.get<std::int16_t>(254), qform = h.get<std::int16_t>(252);
  if (sform > 0) {
    for (int r = 0; r < 3; ++r)
      for (int c = 0; c < 3; ++c) m[r][c] = h.get<float>(280 + 16 * r + 4 * c);
  } else if (qform > 0) {
    const double b = h.get<float>(256), c = h.get<float>(260), d = h.get<float>(264);
    const double a = std::sqrt(std::max(0.0, 1.0 - (b * b + c * c + d * d)));
    const double qfac = h.get<float>(76) < 0 ? -1.0 : 1.0;
    const double R[3][3] = {{a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)},
                            {2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)},
                            {2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b}};
    for (int r = 0; r < 3; ++r)
      for (int col = 0; col < 3; ++col) m[r][col] = R[r][col] * (col == 2 ? qfac : 1.0);
  } else {
    return {1, 1, 1};
  }
  std::array<int, 3> s{};
  for (int c = 0; c < 3; ++c) {
    for (int r = 0; r < 3; ++r)
      if (r != c && std::abs(m[r][c]) > 1e-6 * (std::abs(m[c][c]) + 1e-12))
        throw IoError(path, "oblique or permuted orientation is not supported");
    if (m[c][c] == 0) throw IoError(path, "degenerate orientation matrix");
    s[c] = m[c][c] < 0 ? -1 : 1;
  }
  return s;
}

template <class T>
double load_as(const std::uint8_t* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof v);
  if (swap) {
    auto* q = reinterpret_cast<std::uint8_t*>(&v);
    std::reverse(q, q + sizeof v);
  }
  return static_cast<double>(v);
}

}  // namespace

VoxelGrid read_nifti(const fs::path& path) {
  const auto bytes = read_all_maybe_gz(path);
  const std::string ps = path.string();
  if (bytes.size() < kHeaderSize) throw IoError(ps, "truncated NIfTI header");
  RawHeader h;
  std::copy(bytes.begin(), bytes.begin() + kHeaderSize, h.b.begin());
  if (h.get<std::int32_t>(0) != kHeaderSize) {
    h.swap = true;
    if (h.get<std::int32_t>(0) != kHeaderSize) throw IoError(ps, "not a NIfTI-1 file (bad sizeof_hdr)");
  }
  if (std::memcmp(h.b.data() + 344, "n+1", 4) != 0) throw IoError(ps, "not a single-file NIfTI-1 image");
  const int ndim = h.get<std::int16_t>(40);
  if (ndim < 2 || ndim > 4) throw IoError(ps, "unsupported dimensionality " + std::to_string(ndim));
  const int nx = h.get<std::int16_t>(42), ny = h.get<std::int16_t>(44);
  const int nz = ndim >= 3 ? h.get<std::int16_t>(46) : 1;
  if (ndim == 4 && h.get<std::int16_t>(48) > 1) throw IoError(ps, "4-D series are not supported");
  if (nx < 1 || ny < 1 || nz < 1) throw IoError(ps, "non-positive dimension");
  const int dtype = h.get<std::int16_t>(70);
  const auto off = static_cast<std::size_t>(h.get<float>(108));
  int size = 0;
  double (*load)(const std::uint8_t*, bool) = nullptr;
  switch (dtype) {
    case 2: size = 1; load = load_as<std::uint8_t>; break;
    case 4: size = 2; load = load_as<std::int16_t>; break;
    case 8: size = 4; load = load_as<std::int32_t>; break;
    case 16: size = 4; load = load_as<float>; break;
    case 64: size = 8; load = load_as<double>; break;
    case 256: size = 1; load = load_as<std::int8_t>; break;
    case 512: size = 2; load = load_as<std::uint16_t>; break;
    case 768: size = 4; load = load_as<std::uint32_t>; break;
    default: throw IoError(ps, "unsupported NIfTI datatype " + std::to_string(dtype));
  }
  const std::size_t n = static_cast<std::size_t>(nx) * ny * nz;
  if (off < kHeaderSize || bytes.size() < off + n * size) throw IoError(ps, "truncated voxel data");
  const auto sign = axis_signs(h, ps);
  double slope = h.get<float>(112), inter = h.get<float>(116);
  if (slope == 0 || !std::isfinite(slope)) {
    slope = 1;
    inter = 0;
  }

  VoxelGrid g;
  g.width = nx;
  g.height = ny;
  g.depth = nz;
  g.spacing = {std::abs(h.get<float>(88)), std::abs(h.get<float>(84)), std::abs(h.get<float>(80))};
  for (auto& s : g.spacing)
    if (!(s > 0)) s = 1.0;
  g.values.resize(n);
  const std::uint8_t* data = bytes.data() + off;
  for (int z = 0; z < nz; ++z)
    for (int y = 0; y < ny; ++y)
      for (int x = 0; x < nx; ++x) {
        const std::size_t src = (static_cast<std::size_t>(z) * ny + y) * nx + x;
        const int zz = sign[2] > 0 ? z : nz - 1 - z, yy = sign[1] > 0 ? y : ny - 1 - y, xx = sign[0] > 0 ? x : nx - 1 - x;
        g.values[(static_cast<std::size_t>(zz) * ny + yy) * nx + xx] = load(data + src * size, h.swap) * slope + inter;
      }
  return g;
}

void write_nifti(const fs::path& path, const VoxelGrid& g, NiftiType type) {
  if (g.values.size() != static_cast<std::size_t>(g.depth) * g.height * g.width)
    throw std::invalid_argument("write_nifti: value count does not match shape");
  if (g.depth > 32767 || g.height > 32767 || g.width > 32767) throw std::invalid_argument("write_nifti: dimension too large");
  RawHeader h;
  h.put<std::int32_t>(0, kHeaderSize);
  h.put<std::int16_t>(40, 3);
  h.put<std::int16_t>(42, static_cast<std::int16_t>(g.width));
  h.put<std::int16_t>(44, static_cast<std::int16_t>(g.height));
  h.put<std::int16_t>(46, static_cast<std::int16_t>(g.depth));
  for (int i = 4; i < 8; ++i) h.put<std::int16_t>(40 + 2 * i, 1);
  const int size = type == NiftiType::Uint8 ? 1 : type == NiftiType::Float32 ? 4 : 8;
  h.put<std::int16_t>(70, type == NiftiType::Uint8 ? 2 : type == NiftiType::Float32 ? 16 : 64);
  h.put<std::int16_t>(72, static_cast<std::int16_t>(8 * size));
  h.put<float>(76, 1.0f);
  h.put<float>(80, static_cast<float>(g.spacing[2]));
  h.put<float>(84, static_cast<float>(g.spacing[1]));
  h.put<float>(88, static_cast<float>(g.spacing[0]));
  h.put<float>(108, static_cast<float>(kDataOffset));
  h.put<float>(112, 1.0f);
  h.put<std::uint8_t>(123, 2);  // mm
  h.put<std::int16_t>(254, 1);
  h.put<float>(280, static_cast<float>(g.spacing[2]));
  h.put<float>(296 + 4, static_cast<float>(g.spacing[1]));
  h.put<float>(312 + 8, static_cast<float>(g.spacing[0]));
  std::memcpy(h.b.data() + 344, "n+1", 4);

  std::vector<std::uint8_t> out = h.b;
  out.resize(kDataOffset + g.values.size() * size);
  std::uint8_t* p = out.data() + kDataOffset;
  for (double v : g.values) {
    if (type == NiftiType::Uint8) {
      *p = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
    } else if (type == NiftiType::Float32) {
      const float f = static_cast<float>(v);
      std::memcpy(p, &f, 4);
    } else {
      std::memcpy(p, &v, 8);
    }
    p += size;
  }
  write_all_maybe_gz(path, out);
}

void write_volume_nifti(const fs::path& path, const Volume& v) {
  v.validate();
  write_nifti(path, VoxelGrid{v.depth(), v.height(), v.width(), v.spacing, v.dense()}, NiftiType::Float64);
}

void write_mask_nifti(const fs::path& path, const Mask3D& m, const std::array<double, 3>& spacing) {
  VoxelGrid g{m.depth(), m.height(), m.width(), spacing, std::vector<double>(m.values().begin(), m.values().end())};
  write_nifti(path, g, NiftiType::Uint8);
}

Mask3D binarize(const VoxelGrid& g, const std::set<int>& label_ids) {
  Mask3D m(g.depth, g.height, g.width);
  for (std::size_t i = 0; i < g.values.size(); ++i) {
    const double v = g.values[i];
    m.values()[i] = label_ids.empty() ? v != 0 : label_ids.count(static_cast<int>(std::lround(v))) > 0;
  }
  return m;
}

// ---- PNG / TIFF ----

namespace {

void png_silent_error(png_structp png, png_const_charp) { png_longjmp(png, 1); }
void png_silent_warning(png_structp, png_const_charp) {}

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  FILE* fp = nullptr;
  ~PngReadGuard() {
    if (png) png_destroy_read_struct(&png, info ? &info : nullptr, nullptr);
    if (fp) std::fclose(fp);
  }
};

Grid2<double> read_png(const fs::path& path) {
  PngReadGuard g;
  g.fp = std::fopen(path.c_str(), "rb");
  if (!g.fp) throw IoError(path.string(), "cannot open");
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_silent_error, png_silent_warning);
  g.info = g.png ? png_create_info_struct(g.png) : nullptr;
  if (!g.info) throw IoError(path.string(), "libpng init failed");
  if (setjmp(png_jmpbuf(g.png))) throw IoError(path.string(), "corrupt PNG");
  png_init_io(g.png, g.fp);
  png_read_png(g.png, g.info, PNG_TRANSFORM_EXPAND | PNG_TRANSFORM_STRIP_ALPHA, nullptr);
  const int w = static_cast<int>(png_get_image_width(g.png, g.info));
  const int h = static_cast<int>(png_get_image_height(g.png, g.info));
  const int depth = png_get_bit_depth(g.png, g.info);
  const int channels = png_get_channels(g.png, g.info);
  auto rows = png_get_rows(g.png, g.info);
  Grid2<double> out(h, w);
  const int bytes = depth == 16 ? 2 : 1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0;
      for (int c = 0; c < channels; ++c) {
        const png_bytep p = rows[y] + (static_cast<std::size_t>(x) * channels + c) * bytes;
        acc += bytes == 2 ? (p[0] << 8 | p[1]) : p[0];
      }
      out(y, x) = acc / channels;
    }
  return out;
}

Grid2<double> read_tiff(const fs::path& path) {
  TIFFSetWarningHandler(nullptr);
  TIFFSetErrorHandler(nullptr);
  TIFF* tif = TIFFOpen(path.c_str(), "r");
  if (!tif) throw IoError(path.string(), "cannot open TIFF");
  std::uint32_t w = 0, h = 0;
  std::uint16_t bps = 8, spp = 1, fmt = SAMPLEFORMAT_UINT, planar = PLANARCONFIG_CONTIG;
  TIFFGetField(tif, TIFFTAG_IMAGEWIDTH, &w);
  TIFFGetField(tif, TIFFTAG_IMAGELENGTH, &h);
  TIFFGetFieldDefaulted(tif, TIFFTAG_BITSPERSAMPLE, &bps);
  TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLESPERPIXEL, &spp);
  TIFFGetFieldDefaulted(tif, TIFFTAG_SAMPLEFORMAT, &fmt);
  TIFFGetFieldDefaulted(tif, TIFFTAG_PLANARCONFIG, &planar);
  if (spp != 1 || planar != PLANARCONFIG_CONTIG || w == 0 || h == 0) {
    TIFFClose(tif);
    throw IoError(path.string(), "only single-channel TIFF is supported");
  }
  Grid2<double> out(static_cast<int>(h), static_cast<int>(w));
  std::vector<std::uint8_t> line(TIFFScanlineSize(tif));
  for (std::uint32_t y = 0; y < h; ++y) {
    if (TIFFReadScanline(tif, line.data(), y) < 0) {
      TIFFClose(tif);
      throw IoError(path.string(), "corrupt TIFF scanline");
    }
    for (std::uint32_t x = 0; x < w; ++x) {
      const std::uint8_t* p = line.data() + static_cast<std::size_t>(x) * (bps / 8);
      double v = 0;
      if (fmt == SAMPLEFORMAT_IEEEFP && bps == 64) v = load_as<double>(p, false);
      else if (fmt == SAMPLEFORMAT_IEEEFP && bps == 32) v = load_as<float>(p, false);
      else if (bps == 16) v = fmt == SAMPLEFORMAT_INT ? load_as<std::int16_t>(p, false) : load_as<std::uint16_t>(p, false);
      else if (bps == 8) v = fmt == SAMPLEFORMAT_INT ? load_as<std::int8_t>(p, false) : p[0];
      else {
        TIFFClose(tif);
        throw IoError(path.string(), "unsupported TIFF sample format");
      }
      out(static_cast<int>(y), static_cast<int>(x)) = v;
    }
  }
  TIFFClose(tif);
  return out;
}

}  // namespace

Grid2<double> read_image2d(const fs::path& path) {
  if (!fs::exists(path)) throw IoError(path.string(), "file not found");
  auto ext = path.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  if (ext == ".png") return read_png(path);
  if (ext == ".tif" || ext == ".tiff") return read_tiff(path);
  throw IoError(path.string(), "unsupported 2-D image format '" + ext + "'");
}

void write_png_gray(const fs::path& path, const Grid2<double>& values, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("write_png_gray: bit depth must be 8 or 16");
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw IoError(path.string(), "cannot open for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_silent_error, png_silent_warning);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, info ? &info : nullptr);
    std::fclose(fp);
    throw IoError(path.string(), "PNG encode failed");
  }
  png_init_io(png, fp);
  const int w = values.width(), h = values.height();
  png_set_IHDR(png, info, w, h, bit_depth, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  const long maxv = bit_depth == 8 ? 255 : 65535;
  std::vector<std::uint8_t> row(static_cast<std::size_t>(w) * (bit_depth / 8));
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const long v = std::clamp(std::lround(values(y, x)), 0L, maxv);
      if (bit_depth == 8) {
        row[x] = static_cast<std::uint8_t>(v);
      } else {
        row[2 * x] = static_cast<std::uint8_t>(v >> 8);
        row[2 * x + 1] = static_cast<std::uint8_t>(v & 0xff);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::fclose(fp) != 0) throw IoError(path.string(), "write failed");
}

void write_tiff_float(const fs::path& path, const Grid2<double>& values) {
  TIFF* tif = TIFFOpen(path.c_str(), "w");
  if (!tif) throw IoError(path.string(), "cannot open for writing");
  TIFFSetField(tif, TIFFTAG_IMAGEWIDTH, static_cast<std::uint32_t>(values.width()));
  TIFFSetField(tif, TIFFTAG_IMAGELENGTH, static_cast<std::uint32_t>(values.height()));
  TIFFSetField(tif, TIFFTAG_BITSPERSAMPLE, 64);
  TIFFSetField(tif, TIFFTAG_SAMPLESPERPIXEL, 1);
  TIFFSetField(tif, TIFFTAG_SAMPLEFORMAT, SAMPLEFORMAT_IEEEFP);
  TIFFSetField(tif, TIFFTAG_PHOTOMETRIC, PHOTOMETRIC_MINISBLACK);
  TIFFSetField(tif, TIFFTAG_PLANARCONFIG, PLANARCONFIG_CONTIG);
  TIFFSetField(tif, TIFFTAG_ROWSPERSTRIP, 1);
  for (int y = 0; y < values.height(); ++y) {
    std::vector<double> row(values.data() + static_cast<std::size_t>(y) * values.width(),
                            values.data() + static_cast<std::size_t>(y + 1) * values.width());
    if (TIFFWriteScanline(tif, row.data(), static_cast<std::uint32_t>(y), 0) < 0) {
      TIFFClose(tif);
      throw IoError(path.string(), "write failed");
    }
  }
  TIFFClose(tif);
}

// ---- manifest ----

const ManifestEntry& DatasetManifest::at(const std::string& id) const {
  for (const auto& c : cases)
    if (c.id == id) return c;
  throw std::invalid_argument("manifest has no case '" + id + "'");
}

DatasetManifest manifest_from_json(const nlohmann::json& j, const fs::path& base_dir) {
  if (j.value("schema", std::string()) != kManifestSchema)
    throw std::invalid_argument(std::string("manifest schema must be '") + kManifestSchema + "'");
  DatasetManifest m;
  m.base_dir = base_dir;
  for (const auto& cj : j.at("cases")) {
    ManifestEntry e;
    e.id = cj.at("id").get<std::string>();
    e.modality = cj.value("modality", std::string("unknown"));
    e.is_2d = cj.value("dims", std::string("3d")) == "2d";
    auto paths = [&](const char* key) {
      std::vector<fs::path> out;
      if (!cj.contains(key)) return out;
      const auto& v = cj.at(key);
      if (v.is_string()) out.emplace_back(v.get<std::string>());
      else
        for (const auto& s : v) out.emplace_back(s.get<std::string>());
      return out;
    };
    e.images = paths("image");
    e.masks = paths("mask");
    if (e.images.empty()) throw std::invalid_argument("manifest case '" + e.id + "' has no image");
    if (!e.is_2d && (e.images.size() != 1 || e.masks.size() > 1))
      throw std::invalid_argument("manifest case '" + e.id + "': 3-D cases take one image and at most one mask");
    if (e.is_2d && !e.masks.empty() && e.masks.size() != e.images.size())
      throw std::invalid_argument("manifest case '" + e.id + "': image and mask lists differ in length");
    if (cj.contains("label_ids"))
      for (int id : cj.at("label_ids")) e.label_ids.insert(id);
    for (const auto& other : m.cases)
      if (other.id == e.id) throw std::invalid_argument("manifest: duplicate case id '" + e.id + "'");
    m.cases.push_back(std::move(e));
  }
  return m;
}

DatasetManifest read_manifest(const fs::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError(path.string(), "cannot open manifest");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string(), std::string("manifest is not valid JSON: ") + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json cases = nlohmann::json::array();
  for (const auto& e : m.cases) {
    auto strs = [](const std::vector<fs::path>& ps) {
      nlohmann::json a = nlohmann::json::array();
      for (const auto& p : ps) a.push_back(p.string());
      return a;
    };
    nlohmann::json c{{"id", e.id}, {"modality", e.modality}, {"dims", e.is_2d ? "2d" : "3d"}};
    c["image"] = e.is_2d ? strs(e.images) : nlohmann::json(e.images.front().string());
    if (!e.masks.empty()) c["mask"] = e.is_2d ? strs(e.masks) : nlohmann::json(e.masks.front().string());
    if (!e.label_ids.empty()) c["label_ids"] = e.label_ids;
    cases.push_back(c);
  }
  return {{"schema", kManifestSchema}, {"cases", cases}};
}

LoadedCase load_case(const ManifestEntry& e, const fs::path& base_dir) {
  auto resolve = [&](const fs::path& p) { return p.is_absolute() || base_dir.empty() ? p : base_dir / p; };
  LoadedCase lc;
  lc.id = e.id;
  lc.modality = e.modality;
  lc.is_2d = e.is_2d;
  if (!e.is_2d) {
    const auto img = read_nifti(resolve(e.images.front()));
    lc.volume = Volume::from_dense(img.depth, img.height, img.width, img.values, img.spacing);
    if (!e.masks.empty()) {
      const auto mp = resolve(e.masks.front());
      const auto mk = read_nifti(mp);
      if (mk.depth != img.depth || mk.height != img.height || mk.width != img.width)
        throw std::invalid_argument(mp.string() + ": mask shape does not match image");
      lc.mask = binarize(mk, e.label_ids);
    }
    return lc;
  }
  std::vector<Grid2<double>> imgs;
  for (const auto& p : e.images) imgs.push_back(read_image2d(resolve(p)));
  const int h = imgs.front().height(), w = imgs.front().width();
  std::vector<double> dense;
  for (std::size_t i = 0; i < imgs.size(); ++i) {
    if (imgs[i].height() != h || imgs[i].width() != w)
      throw std::invalid_argument(resolve(e.images[i]).string() + ": 2-D slices of one case must share a shape");
    dense.insert(dense.end(), imgs[i].values().begin(), imgs[i].values().end());
  }
  lc.volume = Volume::from_dense(static_cast<int>(imgs.size()), h, w, dense);
  if (!e.masks.empty()) {
    VoxelGrid g{static_cast<int>(imgs.size()), h, w, {1, 1, 1}, {}};
    for (const auto& p : e.masks) {
      const auto m = read_image2d(resolve(p));
      if (m.height() != h || m.width() != w) throw std::invalid_argument(resolve(p).string() + ": mask shape does not match image");
      g.values.insert(g.values.end(), m.values().begin(), m.values().end());
    }
    lc.mask = binarize(g, e.label_ids);
  }
  return lc;
}

}  // namespace promptmed

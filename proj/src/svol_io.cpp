#include "pretune/svol_io.hpp"

#include <zlib.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace fs = std::filesystem;

namespace pretune {

namespace {

constexpr char kMagic[8] = {'S', 'U', 'L', 'C', 'V', 'O', 'L', '1'};

void append_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void append_f32(std::string& buf, float v) {
  uint32_t bits;
  std::memcpy(&bits, &v, 4);
  append_u32(buf, bits);
}

uint32_t read_u32(const std::string& buf, size_t& off) {
  if (off + 4 > buf.size()) throw IoError("svol: truncated header");
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<unsigned char>(buf[off + i])) << (8 * i);
  off += 4;
  return v;
}

float read_f32(const std::string& buf, size_t& off) {
  const uint32_t bits = read_u32(buf, off);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

std::string serialize_header(const Dims& dims, const Spacing& spacing, uint8_t dtype) {
  std::string buf(kMagic, 8);
  append_u32(buf, static_cast<uint32_t>(dims.d));
  append_u32(buf, static_cast<uint32_t>(dims.h));
  append_u32(buf, static_cast<uint32_t>(dims.w));
  append_f32(buf, static_cast<float>(spacing.d));
  append_f32(buf, static_cast<float>(spacing.h));
  append_f32(buf, static_cast<float>(spacing.w));
  buf.push_back(static_cast<char>(dtype));
  return buf;
}

void write_file(const std::string& path, const std::string& payload) {
  if (path.size() > 3 && path.ends_with(".gz")) {
    gzFile f = gzopen(path.c_str(), "wb");
    if (!f) throw IoError("cannot open for write: " + path);
    if (gzwrite(f, payload.data(), static_cast<unsigned>(payload.size())) !=
        static_cast<int>(payload.size())) {
      gzclose(f);
      throw IoError("gzip write failed: " + path);
    }
    gzclose(f);
  } else {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f.write(payload.data(), static_cast<std::streamsize>(payload.size()));
    if (!f) throw IoError("write failed: " + path);
  }
}

// gzread is transparent for plain files, so one reader covers both.
std::string read_file(const std::string& path) {
  gzFile f = gzopen(path.c_str(), "rb");
  if (!f) throw IoError("cannot open: " + path);
  std::string out;
  char chunk[1 << 16];
  int n;
  while ((n = gzread(f, chunk, sizeof(chunk))) > 0) out.append(chunk, static_cast<size_t>(n));
  const bool bad = n < 0;
  gzclose(f);
  if (bad) throw IoError("read failed: " + path);
  return out;
}

struct SvolHeader {
  Dims dims;
  Spacing spacing;
  uint8_t dtype;
  size_t payload_off;
};

SvolHeader parse_header(const std::string& buf, const std::string& path) {
  if (buf.size() < 29 || std::memcmp(buf.data(), kMagic, 8) != 0) {
    throw IoError("not an SVOL v1 file: " + path);
  }
  size_t off = 8;
  SvolHeader h;
  h.dims.d = read_u32(buf, off);
  h.dims.h = read_u32(buf, off);
  h.dims.w = read_u32(buf, off);
  h.spacing.d = read_f32(buf, off);
  h.spacing.h = read_f32(buf, off);
  h.spacing.w = read_f32(buf, off);
  h.dtype = static_cast<uint8_t>(buf[off++]);
  h.payload_off = off;
  return h;
}

}  // namespace

void write_svol(const std::string& path, const Volume& volume) {
  std::string buf = serialize_header(volume.dims, volume.spacing, 0);
  buf.reserve(buf.size() + volume.data.size() * 4);
  for (float v : volume.data) append_f32(buf, v);
  write_file(path, buf);
}

void write_svol(const std::string& path, const SegmentationMask& mask) {
  std::string buf = serialize_header(mask.dims, mask.spacing, 1);
  buf.append(reinterpret_cast<const char*>(mask.labels.data()), mask.labels.size());
  write_file(path, buf);
}

Volume read_svol_volume(const std::string& path) {
  const std::string buf = read_file(path);
  const SvolHeader h = parse_header(buf, path);
  if (h.dtype != 0) throw IoError("svol: expected f32 intensities in " + path);
  Volume v = Volume::create(h.dims, h.spacing);
  if (buf.size() - h.payload_off != v.data.size() * 4) throw IoError("svol: payload size mismatch in " + path);
  size_t off = h.payload_off;
  for (auto& x : v.data) x = read_f32(buf, off);
  return v;
}

SegmentationMask read_svol_mask(const std::string& path) {
  const std::string buf = read_file(path);
  const SvolHeader h = parse_header(buf, path);
  if (h.dtype != 1) throw IoError("svol: expected u8 labels in " + path);
  SegmentationMask m = SegmentationMask::create(h.dims, h.spacing);
  if (buf.size() - h.payload_off != m.labels.size()) throw IoError("svol: payload size mismatch in " + path);
  std::memcpy(m.labels.data(), buf.data() + h.payload_off, m.labels.size());
  return m;
}

void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot open for write: " + path);
  f << "id,volume_path,mask_path,class_label\n";
  for (const auto& e : entries) {
    f << e.id << ',' << e.volume_path << ',' << e.mask_path << ',' << to_string(e.class_label)
      << '\n';
  }
}

std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open manifest: " + path);
  std::string line;
  if (!std::getline(f, line)) throw IoError("empty manifest: " + path);
  if (line != "id,volume_path,mask_path,class_label") {
    throw IoError("manifest header mismatch in " + path);
  }
  std::vector<ManifestEntry> out;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    ManifestEntry e;
    std::string label;
    if (!std::getline(ss, e.id, ',') || !std::getline(ss, e.volume_path, ',') ||
        !std::getline(ss, e.mask_path, ',') || !std::getline(ss, label)) {
      throw IoError("malformed manifest row: " + line);
    }
    e.class_label = class_label_from_string(label);
    out.push_back(std::move(e));
  }
  return out;
}

std::string save_cohort(const std::string& dir, const std::vector<SubjectRecord>& subjects,
                        bool gzip) {
  fs::create_directories(dir);
  std::vector<ManifestEntry> entries;
  const std::string ext = gzip ? ".svol.gz" : ".svol";
  for (const auto& s : subjects) {
    ManifestEntry e;
    e.id = s.id;
    e.volume_path = s.id + ext;
    e.mask_path = s.id + "_mask" + ext;
    e.class_label = s.class_label;
    write_svol((fs::path(dir) / e.volume_path).string(), s.volume);
    write_svol((fs::path(dir) / e.mask_path).string(), s.mask);
    entries.push_back(std::move(e));
  }
  const std::string manifest = (fs::path(dir) / "manifest.csv").string();
  write_manifest(manifest, entries);
  return manifest;
}

std::vector<SubjectRecord> load_cohort(const std::string& manifest_path) {
  const auto entries = read_manifest(manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  std::vector<SubjectRecord> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    SubjectRecord rec;
    rec.id = e.id;
    auto resolve = [&](const std::string& p) {
      return fs::path(p).is_absolute() ? p : (base / p).string();
    };
    rec.volume = read_svol_volume(resolve(e.volume_path));
    rec.mask = read_svol_mask(resolve(e.mask_path));
    rec.class_label = e.class_label;
    rec.validate();
    out.push_back(std::move(rec));
  }
  return out;
}

}  // namespace pretune

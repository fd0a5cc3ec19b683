#pragma once

#include <string>
#include <vector>

#include "pretune/volume.hpp"

namespace pretune {

// "SVOL v1": 8-byte magic `SULCVOL1`; little-endian u32 x3 dims (d,h,w);
// little-endian f32 x3 spacing in mm; u8 dtype code (0 = f32 intensities,
// 1 = u8 labels); then the raw voxel payload in depth-major order. Files
// whose path ends in ".gz" are whole-file gzip; reads auto-detect either way.
void write_svol(const std::string& path, const Volume& volume);
void write_svol(const std::string& path, const SegmentationMask& mask);
Volume read_svol_volume(const std::string& path);
SegmentationMask read_svol_mask(const std::string& path);

struct ManifestEntry {
  std::string id;
  std::string volume_path;
  std::string mask_path;
  ClassLabel class_label = ClassLabel::absent;
};

// Cohort manifest: UTF-8 CSV, header `id,volume_path,mask_path,class_label`.
// Relative paths resolve against the manifest's directory.
void write_manifest(const std::string& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(const std::string& path);

// Writes one SVOL pair per subject plus manifest.csv into `dir`.
std::string save_cohort(const std::string& dir, const std::vector<SubjectRecord>& subjects,
                        bool gzip = false);
std::vector<SubjectRecord> load_cohort(const std::string& manifest_path);

}  // namespace pretune

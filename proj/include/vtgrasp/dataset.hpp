#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "vtgrasp/error.hpp"
#include "vtgrasp/tactile_sim.hpp"
#include "vtgrasp/tensor.hpp"

namespace vtgrasp {

// On disk: <dir>/manifest.jsonl with one {"path","label","frames","seed"}
// record per line, plus one VTSF1 file per sample.
inline std::string sample_filename(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "sample_%06zu.vtsf", index);
  return buf;
}

inline void write_dataset(const std::filesystem::path& dir, const std::vector<Sample>& samples) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::ofstream manifest(dir / "manifest.jsonl", std::ios::binary);
  if (!manifest) throw IoError("cannot write " + (dir / "manifest.jsonl").string());
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const std::string name = sample_filename(i);
    save_tensor(dir / name, samples[i].data);
    const nlohmann::json rec = {
        {"path", name}, {"label", samples[i].label}, {"frames", samples[i].frames}, {"seed", samples[i].seed}};
    manifest << rec.dump() << '\n';
  }
  if (!manifest) throw IoError("failed writing manifest");
}

inline std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.jsonl");
  if (!manifest) throw IoError("no manifest.jsonl in " + dir.string());
  std::vector<Sample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto rec = nlohmann::json::parse(line);
      Sample s;
      s.label = rec.at("label").get<int>();
      s.frames = rec.at("frames").get<std::size_t>();
      s.seed = rec.at("seed").get<std::uint64_t>();
      s.data = load_tensor(dir / rec.at("path").get<std::string>());
      out.push_back(std::move(s));
    } catch (const nlohmann::json::exception& e) {
      throw IoError("manifest line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (out.empty()) throw IoError("dataset " + dir.string() + " is empty");
  const Shape& first = out.front().data.shape();
  for (const Sample& s : out) {
    if (s.data.shape() != first) throw GeometryError("dataset mixes sample shapes");
    if (s.label != 0 && s.label != 1) throw IoError("labels must be 0 or 1");
  }
  return out;
}

// 8-bit binary PGM of the luminance of a [3 x H x W] frame.
inline void write_pgm(const std::filesystem::path& path, const Tensor& frame) {
  if (frame.rank() != 3 || frame.dim(0) != 3) throw DimensionError("expected a [3 x H x W] frame, got " + shape_str(frame.shape()));
  const std::size_t h = frame.dim(1), w = frame.dim(2), plane = h * w;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << "P5\n" << w << ' ' << h << "\n255\n";
  std::vector<unsigned char> px(plane);
  for (std::size_t i = 0; i < plane; ++i) {
    const double y = 0.299 * frame[i] + 0.587 * frame[plane + i] + 0.114 * frame[2 * plane + i];
    px[i] = static_cast<unsigned char>(std::clamp(y, 0.0, 1.0) * 255.0 + 0.5);
  }
  out.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!out) throw IoError("failed writing " + path.string());
}

// Writes every frame of a sample as <stem>_fNN.pgm; returns the paths.
inline std::vector<std::filesystem::path> export_frames(const Tensor& sample, const std::filesystem::path& dir,
                                                        const std::string& stem) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  if (sample.rank() == 3) {
    paths.push_back(dir / (stem + ".pgm"));
    write_pgm(paths.back(), sample);
    return paths;
  }
  if (sample.rank() != 4) throw DimensionError("expected an image or clip, got " + shape_str(sample.shape()));
  const std::size_t per = sample.size() / sample.dim(0);
  for (std::size_t f = 0; f < sample.dim(0); ++f) {
    Tensor frame({sample.dim(1), sample.dim(2), sample.dim(3)});
    std::copy(sample.ptr() + f * per, sample.ptr() + (f + 1) * per, frame.ptr());
    char suffix[16];
    std::snprintf(suffix, sizeof suffix, "_f%02zu.pgm", f);
    paths.push_back(dir / (stem + suffix));
    write_pgm(paths.back(), frame);
  }
  return paths;
}

}  // namespace vtgrasp

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "apex/error.hpp"
#include "apex/explainer.hpp"

namespace apex {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json range_json(const std::optional<std::pair<std::size_t, std::size_t>>& r) {
  if (!r) return nullptr;
  return json::array({r->first, r->second});
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

struct Rect {
  std::size_t x, y, w, h;
};

// Rectangles in (time, frequency) image coordinates; one per band.
std::vector<Rect> region_rects(const Region& r, std::size_t f_in, std::size_t t_in) {
  auto f = r.f_range.value_or(std::pair<std::size_t, std::size_t>{0, f_in});
  auto t = r.t_range.value_or(std::pair<std::size_t, std::size_t>{0, t_in});
  switch (r.kind) {
    case Scheme::kSquare: return {{t.first, f.first, t.second - t.first, f.second - f.first}};
    case Scheme::kTime: return {{t.first, 0, t.second - t.first, f_in}};
    case Scheme::kFrequency: return {{0, f.first, t_in, f.second - f.first}};
    case Scheme::kTimeFrequency:
      return {{0, f.first, t_in, f.second - f.first}, {t.first, 0, t.second - t.first, f_in}};
  }
  return {};
}

GrayImage spectrogram_image(const SpectrogramImage& x) {
  GrayImage img;
  img.width = x.time_frames;
  img.height = x.freq_bins;
  img.pixels.resize(x.values.size());
  if (x.values.empty()) return img;
  const auto [lo, hi] = std::minmax_element(x.values.begin(), x.values.end());
  const double span = static_cast<double>(*hi) - static_cast<double>(*lo);
  for (std::size_t i = 0; i < x.values.size(); ++i) {
    const double v = span > 0.0 ? (static_cast<double>(x.values[i]) - *lo) / span : 0.0;
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

}  // namespace

void write_pgm(const GrayImage& image, const fs::path& path) {
  if (image.pixels.size() != image.width * image.height) {
    throw ShapeError("write_pgm: pixel count does not match geometry");
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P5\n" << image.width << ' ' << image.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.pixels.data()),
            static_cast<std::streamsize>(image.pixels.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

GrayImage read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  GrayImage img;
  int maxval = 0;
  in >> magic >> img.width >> img.height >> maxval;
  if (!in || magic != "P5" || maxval != 255) throw FormatError(path.string() + ": not an 8-bit P5 graymap");
  in.get();
  img.pixels.resize(img.width * img.height);
  in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(img.pixels.size())) {
    throw FormatError(path.string() + ": truncated pixel data");
  }
  return img;
}

GrayImage quantize(const Heatmap& heatmap) {
  GrayImage img;
  img.width = heatmap.time_frames;
  img.height = heatmap.freq_bins;
  img.pixels.resize(heatmap.values.size());
  for (std::size_t i = 0; i < heatmap.values.size(); ++i) {
    const double v = std::clamp(heatmap.values[i], 0.0, 1.0);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  return img;
}

std::string explanation_json(const Explanation& expl) {
  json channels = json::array();
  for (const auto& ce : expl.channels) {
    json protos = json::array();
    for (const auto& p : ce.prototypes) {
      protos.push_back({{"sample_id", p.sample_id},
                        {"activation", p.activation},
                        {"freq", p.freq ? json(*p.freq) : json(nullptr)},
                        {"time", p.time ? json(*p.time) : json(nullptr)},
                        {"purity", p.purity},
                        {"dominant_class", p.dominant_class}});
    }
    channels.push_back({{"channel", ce.channel},
                        {"contribution", ce.contribution},
                        {"region",
                         {{"kind", std::string(to_string(ce.region.kind))},
                          {"f_range", range_json(ce.region.f_range)},
                          {"t_range", range_json(ce.region.t_range)}}},
                        {"prototypes", std::move(protos)}});
  }
  const json doc = {{"sample_id", expl.sample_id},
                    {"scheme", std::string(to_string(expl.scheme))},
                    {"predicted_class", expl.predicted_class},
                    {"logits", expl.logits},
                    {"input_geometry", {expl.input_freq_bins, expl.input_time_frames}},
                    {"channels", std::move(channels)}};
  return doc.dump(1) + "\n";
}

std::vector<fs::path> render_explanation(const Explanation& expl,
                                         const SpectrogramImage* spectrogram,
                                         const fs::path& out_dir) {
  if (spectrogram && (spectrogram->freq_bins != expl.input_freq_bins ||
                      spectrogram->time_frames != expl.input_time_frames)) {
    throw ShapeError("render_explanation: spectrogram is " + std::to_string(spectrogram->freq_bins) +
                     "x" + std::to_string(spectrogram->time_frames) + ", explanation expects " +
                     std::to_string(expl.input_freq_bins) + "x" +
                     std::to_string(expl.input_time_frames));
  }
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

  std::vector<fs::path> written;
  const std::string stem = expl.sample_id.empty() ? "sample" : expl.sample_id;

  const fs::path spec_path = out_dir / (stem + "_spectrogram.pgm");
  if (spectrogram) {
    write_pgm(spectrogram_image(*spectrogram), spec_path);
    written.push_back(spec_path);
  }

  const std::size_t f_in = expl.input_freq_bins, t_in = expl.input_time_frames;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" xmlns:xlink=\"http://www.w3.org/1999/xlink\""
      << " width=\"" << t_in * 8 << "\" height=\"" << f_in * 8 << "\" viewBox=\"0 0 " << t_in
      << ' ' << f_in << "\">\n";
  if (spectrogram) {
    svg << "  <image x=\"0\" y=\"0\" width=\"" << t_in << "\" height=\"" << f_in
        << "\" preserveAspectRatio=\"none\" xlink:href=\"" << spec_path.filename().string()
        << "\"/>\n";
  }
  for (const auto& ce : expl.channels) {
    svg << "  <g id=\"channel-" << ce.channel << "\">\n";
    for (const auto& r : region_rects(ce.region, f_in, t_in)) {
      svg << "    <rect x=\"" << r.x << "\" y=\"" << r.y << "\" width=\"" << r.w << "\" height=\""
          << r.h << "\" fill=\"none\" stroke=\"#00c000\" stroke-width=\"0.25\"/>\n";
    }
    svg << "  </g>\n";
  }
  svg << "</svg>\n";
  const fs::path svg_path = out_dir / (stem + "_overlay.svg");
  write_text(svg_path, svg.str());
  written.push_back(svg_path);

  for (const auto& ce : expl.channels) {
    const fs::path p = out_dir / (stem + "_heatmap_c" + std::to_string(ce.channel) + ".pgm");
    write_pgm(quantize(ce.heatmap), p);
    written.push_back(p);
  }

  const fs::path json_path = out_dir / (stem + "_explanation.json");
  write_text(json_path, explanation_json(expl));
  written.push_back(json_path);
  return written;
}

}  // namespace apex

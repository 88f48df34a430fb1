#include "drift/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "drift/errors.hpp"

namespace drift {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", v);
  return buf;
}

std::string Provenance::comment_line() const {
  return "# config_hash=" + config_hash + " seed=" + std::to_string(seed) + "\n";
}

namespace {

std::ofstream open_text(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IntegrityError("report: cannot open " + path.string());
  return os;
}

// Sum-normalized copy of the layer vector (for plotting shapes).
std::vector<double> normalized_layers(const LayerImportanceProfile& profile) {
  std::vector<double> out = profile.layers;
  double total = 0.0;
  for (const double v : out) total += v;
  if (total > 0.0) {
    for (double& v : out) v /= total;
  }
  return out;
}

double series_l1(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += std::abs(a[i] - b[i]);
  return acc;
}

// The plotted numbers, formatted once so CSV and SVG carry identical text.
struct ProfilePayload {
  std::vector<std::string> names;
  std::vector<std::vector<double>> series;
  std::vector<std::vector<std::string>> formatted;
  std::vector<std::string> legend;
  std::size_t n_layers = 0;
};

ProfilePayload profile_payload(std::span<const NamedProfile> profiles,
                               bool normalize) {
  if (profiles.empty()) {
    throw DegenerateInputError("layer profile report: no series");
  }
  ProfilePayload payload;
  payload.n_layers = profiles[0].profile.layers.size();
  for (const NamedProfile& p : profiles) {
    if (p.profile.layers.size() != payload.n_layers) {
      throw ContractError("layer profile report: series lengths differ");
    }
    payload.names.push_back(p.name);
    payload.series.push_back(normalize ? normalized_layers(p.profile)
                                       : p.profile.layers);
  }
  for (std::size_t s = 0; s < payload.series.size(); ++s) {
    std::vector<std::string> fmt;
    fmt.reserve(payload.n_layers);
    for (const double v : payload.series[s]) fmt.push_back(format_double(v));
    payload.formatted.push_back(std::move(fmt));
    std::string legend = payload.names[s];
    if (s > 0) {
      const std::vector<double> base_norm = normalized_layers(profiles[0].profile);
      const std::vector<double> self_norm = normalized_layers(profiles[s].profile);
      legend += " (shift l1 vs " + payload.names[0] + " = " +
                format_double(series_l1(base_norm, self_norm)) + ")";
    }
    payload.legend.push_back(std::move(legend));
  }
  return payload;
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (const char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  out += '"';
  return out;
}

std::string profile_csv_text(const ProfilePayload& payload,
                             const Provenance& provenance) {
  std::ostringstream os;
  os << provenance.comment_line();
  os << "layer";
  for (const std::string& name : payload.names) os << ',' << csv_escape(name);
  os << '\n';
  for (std::size_t layer = 0; layer < payload.n_layers; ++layer) {
    os << layer;
    for (const auto& fmt : payload.formatted) os << ',' << fmt[layer];
    os << '\n';
  }
  return os.str();
}

const char* const kSeriesColors[] = {"#1f77b4", "#d62728", "#2ca02c",
                                     "#ff7f0e", "#9467bd", "#8c564b",
                                     "#e377c2", "#7f7f7f"};

}  // namespace

void write_profiles_csv(std::span<const NamedProfile> profiles, bool normalize,
                        const Provenance& provenance,
                        const std::filesystem::path& path) {
  const ProfilePayload payload = profile_payload(profiles, normalize);
  open_text(path) << profile_csv_text(payload, provenance);
}

void write_profiles_svg(std::span<const NamedProfile> profiles, bool normalize,
                        const Provenance& provenance,
                        const std::filesystem::path& path) {
  const ProfilePayload payload = profile_payload(profiles, normalize);

  constexpr double kWidth = 640, kHeight = 400;
  constexpr double kLeft = 60, kRight = 20, kTop = 20, kBottom = 50;
  const double plot_w = kWidth - kLeft - kRight;
  const double plot_h = kHeight - kTop - kBottom;

  double y_max = 0.0;
  for (const auto& series : payload.series) {
    for (const double v : series) y_max = std::max(y_max, v);
  }
  if (y_max <= 0.0) y_max = 1.0;

  const auto x_of = [&](std::size_t layer) {
    if (payload.n_layers == 1) return kLeft + plot_w / 2;
    return kLeft + plot_w * static_cast<double>(layer) /
                       static_cast<double>(payload.n_layers - 1);
  };
  const auto y_of = [&](double v) { return kTop + plot_h * (1.0 - v / y_max); };

  std::ofstream os = open_text(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth
     << "\" height=\"" << kHeight << "\" viewBox=\"0 0 " << kWidth << ' '
     << kHeight << "\">\n";
  // The plotted numbers, verbatim, so the figure carries its own data.
  os << "<desc>" << profile_csv_text(payload, provenance) << "</desc>\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  char buf[64];
  const auto fmt_coord = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return std::string(buf);
  };
  // axes
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop + plot_h << "\" x2=\""
     << kLeft + plot_w << "\" y2=\"" << kTop + plot_h
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << kLeft << "\" y1=\"" << kTop << "\" x2=\"" << kLeft
     << "\" y2=\"" << kTop + plot_h << "\" stroke=\"black\"/>\n";
  for (std::size_t layer = 0; layer < payload.n_layers; ++layer) {
    os << "<text x=\"" << fmt_coord(x_of(layer)) << "\" y=\""
       << fmt_coord(kTop + plot_h + 16)
       << "\" font-size=\"10\" text-anchor=\"middle\">" << layer << "</text>\n";
  }
  os << "<text x=\"" << fmt_coord(kLeft + plot_w / 2) << "\" y=\""
     << fmt_coord(kHeight - 12)
     << "\" font-size=\"12\" text-anchor=\"middle\">layer</text>\n";
  os << "<text x=\"14\" y=\"" << fmt_coord(kTop + plot_h / 2)
     << "\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 "
     << fmt_coord(kTop + plot_h / 2) << ")\">"
     << (normalize ? "normalized importance" : "importance") << "</text>\n";

  for (std::size_t s = 0; s < payload.series.size(); ++s) {
    const char* color = kSeriesColors[s % std::size(kSeriesColors)];
    os << "<polyline fill=\"none\" stroke=\"" << color
       << "\" stroke-width=\"1.5\" points=\"";
    for (std::size_t layer = 0; layer < payload.n_layers; ++layer) {
      if (layer) os << ' ';
      os << fmt_coord(x_of(layer)) << ','
         << fmt_coord(y_of(payload.series[s][layer]));
    }
    os << "\"/>\n";
    const double ly = kTop + 14 + 14 * static_cast<double>(s);
    os << "<line x1=\"" << kLeft + 8 << "\" y1=\"" << fmt_coord(ly - 4)
       << "\" x2=\"" << kLeft + 28 << "\" y2=\"" << fmt_coord(ly - 4)
       << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
    os << "<text x=\"" << kLeft + 32 << "\" y=\"" << fmt_coord(ly)
       << "\" font-size=\"10\">" << payload.legend[s] << "</text>\n";
  }
  os << "</svg>\n";
}

DeactivationReport deactivation_report(const TransformerLM& model,
                                       const ImportanceMap& map,
                                       const ExampleSet& eval_set,
                                       double fraction, std::uint64_t seed,
                                       const Provenance& provenance) {
  DeactivationReport report;
  report.provenance = provenance;
  report.fraction = fraction;

  std::optional<TransformerLM> top_model, bottom_model, random_model;
  if (fraction > 0.0) {
    top_model = apply_mask(model, build_mask(map, fraction, MaskMode::Top, seed));
    bottom_model =
        apply_mask(model, build_mask(map, fraction, MaskMode::Bottom, seed));
    random_model =
        apply_mask(model, build_mask(map, fraction, MaskMode::Random, seed));
  }

  for (const Modality modality : {Modality::Speech, Modality::Text}) {
    DeactivationReport::Row row;
    row.modality = to_string(modality);
    row.base_ppl = perplexity(model, eval_set, modality);
    row.top_ppl =
        top_model ? perplexity(*top_model, eval_set, modality) : row.base_ppl;
    row.bottom_ppl = bottom_model ? perplexity(*bottom_model, eval_set, modality)
                                  : row.base_ppl;
    row.random_ppl = random_model ? perplexity(*random_model, eval_set, modality)
                                  : row.base_ppl;
    row.ordering_ok = fraction == 0.0 ||
                      (row.top_ppl >= row.random_ppl &&
                       row.random_ppl >= row.base_ppl &&
                       row.bottom_ppl <= 1.2 * row.base_ppl);
    report.rows.push_back(row);
  }
  return report;
}

void write_deactivation_csv(const DeactivationReport& report,
                            const std::filesystem::path& path) {
  std::ofstream os = open_text(path);
  os << report.provenance.comment_line();
  os << "# fraction=" << format_double(report.fraction) << '\n';
  os << "modality,base,top,bottom,random,ordering_ok\n";
  for (const DeactivationReport::Row& row : report.rows) {
    os << row.modality << ',' << format_double(row.base_ppl) << ','
       << format_double(row.top_ppl) << ',' << format_double(row.bottom_ppl)
       << ',' << format_double(row.random_ppl) << ','
       << (row.ordering_ok ? 1 : 0) << '\n';
  }
}

void write_pgm16(const DenseMatrix& m, const std::filesystem::path& path) {
  if (m.rows < 1 || m.cols < 1) throw ContractError("pgm: empty matrix");
  for (const double v : m.v) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("pgm: values must lie in [0,1]; normalize first");
    }
  }
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IntegrityError("pgm: cannot open " + path.string());
  os << "P5\n" << m.cols << ' ' << m.rows << "\n65535\n";
  for (const double v : m.v) {
    const auto q = static_cast<std::uint16_t>(std::lround(v * 65535.0));
    const char bytes[2] = {static_cast<char>(q >> 8),
                           static_cast<char>(q & 0xff)};
    os.write(bytes, 2);
  }
}

DenseMatrix read_pgm16(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IntegrityError("pgm: cannot open " + path.string());
  std::string magic;
  is >> magic;
  if (magic != "P5") throw IntegrityError("pgm: not a binary PGM");
  std::int64_t cols = 0, rows = 0, maxval = 0;
  is >> cols >> rows >> maxval;
  if (!is || cols < 1 || rows < 1 || maxval != 65535) {
    throw IntegrityError("pgm: unsupported header");
  }
  is.get();  // single whitespace after the header
  DenseMatrix m;
  m.rows = rows;
  m.cols = cols;
  m.v.resize(static_cast<std::size_t>(rows * cols));
  for (double& v : m.v) {
    char bytes[2];
    is.read(bytes, 2);
    if (!is) throw IntegrityError("pgm: truncated raster");
    const std::uint16_t q = static_cast<std::uint16_t>(
        (static_cast<std::uint8_t>(bytes[0]) << 8) |
        static_cast<std::uint8_t>(bytes[1]));
    v = static_cast<double>(q) / 65535.0;
  }
  return m;
}

void write_heatmap_svg(const DenseMatrix& m, const std::filesystem::path& path) {
  if (m.rows < 1 || m.cols < 1) throw ContractError("heatmap: empty matrix");
  for (const double v : m.v) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw ContractError("heatmap: values must lie in [0,1]; normalize first");
    }
  }
  const double cell = std::max(1.0, std::min(8.0, 512.0 / static_cast<double>(
                                                      std::max(m.rows, m.cols))));
  std::ofstream os = open_text(path);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\""
     << static_cast<double>(m.cols) * cell << "\" height=\""
     << static_cast<double>(m.rows) * cell << "\">\n";
  char buf[192];
  for (std::int64_t r = 0; r < m.rows; ++r) {
    for (std::int64_t c = 0; c < m.cols; ++c) {
      const int shade =
          255 - static_cast<int>(std::lround(m.at(r, c) * 255.0));
      std::snprintf(buf, sizeof buf,
                    "<rect x=\"%.1f\" y=\"%.1f\" width=\"%.1f\" height=\"%.1f\""
                    " fill=\"rgb(%d,%d,%d)\"/>\n",
                    static_cast<double>(c) * cell, static_cast<double>(r) * cell,
                    cell, cell, shade, shade, shade);
      os << buf;
    }
  }
  os << "</svg>\n";
}

void write_grid_csv(std::span<const GridRow> rows, const Provenance& provenance,
                    const std::filesystem::path& path) {
  std::ofstream os = open_text(path);
  os << provenance.comment_line();
  os << "arm,strategy,lora_rank,t2t_acc,s2t_acc,text_ppl,speech_ppl,"
        "shift_l1,shift_peak_moved,status\n";
  for (const GridRow& row : rows) {
    os << csv_escape(row.arm) << ',' << row.strategy << ',';
    if (row.lora_rank >= 0) os << row.lora_rank;
    else os << '-';
    os << ',' << format_double(row.t2t_acc) << ',';
    os << (row.s2t_acc ? format_double(*row.s2t_acc) : "-") << ',';
    os << format_double(row.text_ppl) << ',';
    os << (row.speech_ppl ? format_double(*row.speech_ppl) : "-") << ',';
    os << format_double(row.shift_l1) << ',' << row.shift_peak_moved << ','
       << csv_escape(row.status) << '\n';
  }
}

void write_metrics_csv(const TrainResult& result, const Provenance& provenance,
                       const std::filesystem::path& path) {
  std::ofstream os = open_text(path);
  os << provenance.comment_line();
  os << "epoch,split,metric,value\n";
  for (const EpochMetrics& m : result.log) {
    os << m.epoch << ",train,loss," << format_double(m.train_loss) << '\n';
    os << m.epoch << ",eval,text_ppl," << format_double(m.text_ppl) << '\n';
    os << m.epoch << ",eval,speech_ppl," << format_double(m.speech_ppl) << '\n';
  }
}

void write_profile_csv(const LayerImportanceProfile& profile,
                       const Provenance& provenance,
                       const std::filesystem::path& path) {
  std::ofstream os = open_text(path);
  os << provenance.comment_line();
  os << "layer,total,normalized\n";
  const double mass = profile.layer_mass();
  for (std::size_t i = 0; i < profile.layers.size(); ++i) {
    os << i << ',' << format_double(profile.layers[i]) << ','
       << format_double(mass > 0.0 ? profile.layers[i] / mass : 0.0) << '\n';
  }
  for (const auto& [name, total] : profile.extras) {
    os << name << ',' << format_double(total) << ",-\n";
  }
}

}  // namespace drift

#pragma once

// Scores, success rates, CSV logging and static SVG charts.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace mbx {

// S = exp(mean(ln(1 + s_i))) - 1 with rates as fractions.
inline double crafter_score(const std::vector<double>& rates) {
  if (rates.empty()) throw std::invalid_argument("crafter_score: empty rate list");
  double acc = 0.0;
  for (double s : rates) {
    if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("crafter_score: rate out of [0,1]: " + std::to_string(s));
    acc += std::log1p(s);
  }
  return std::expm1(acc / static_cast<double>(rates.size()));
}

// Fraction of episodes in which each flag was set at least once.
inline std::vector<double> success_rate(const std::vector<std::uint32_t>& episode_flags, std::size_t num_flags) {
  if (episode_flags.empty()) throw std::invalid_argument("success_rate: zero episodes");
  std::vector<double> out(num_flags, 0.0);
  for (std::uint32_t f : episode_flags)
    for (std::size_t i = 0; i < num_flags; ++i)
      if (f >> i & 1u) out[i] += 1.0;
  for (double& r : out) r /= static_cast<double>(episode_flags.size());
  return out;
}

// Running per-flag counts (cheap alternative to keeping every episode).
struct AchievementTally {
  std::vector<std::int64_t> counts;
  std::int64_t episodes = 0;
  std::int64_t unlocks = 0;  // total per-episode unlocks

  explicit AchievementTally(std::size_t n = 0) : counts(n, 0) {}
  void add(std::uint32_t flags) {
    episodes += 1;
    for (std::size_t i = 0; i < counts.size(); ++i)
      if (flags >> i & 1u) counts[i] += 1;
    unlocks += std::popcount(flags & ((counts.size() >= 32) ? ~0u : ((1u << counts.size()) - 1u)));
  }
  std::vector<double> rates() const {
    std::vector<double> r(counts.size(), 0.0);
    if (episodes == 0) return r;
    for (std::size_t i = 0; i < counts.size(); ++i) r[i] = static_cast<double>(counts[i]) / static_cast<double>(episodes);
    return r;
  }
};

// ---------------------------------------------------------------------------------------------
// CSV

inline const std::vector<std::string>& csv_columns() {
  static const std::vector<std::string> cols = {"env_step", "arm",  "seed", "return", "score", "achievements_json",
                                                "unique_states", "l_pi", "l_v", "l_r", "l_spr", "lr", "wall_time"};
  return cols;
}

struct MetricRow {
  std::int64_t env_step = 0;
  std::string arm;
  std::uint64_t seed = 0;
  double episode_return = 0.0;
  double score = 0.0;
  std::string achievements_json = "{}";
  std::int64_t unique_states = 0;
  double l_pi = 0.0, l_v = 0.0, l_r = 0.0, l_spr = 0.0;
  double lr = 0.0;
  double wall_time = 0.0;
};

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur += c;
    }
  }
  if (quoted) throw std::runtime_error("csv: unterminated quote");
  out.push_back(cur);
  return out;
}

inline std::string csv_header() {
  std::string h;
  for (const auto& c : csv_columns()) h += (h.empty() ? "" : ",") + c;
  return h;
}

inline std::string csv_line(const MetricRow& r) {
  std::ostringstream os;
  os << r.env_step << ',' << csv_quote(r.arm) << ',' << r.seed << ',' << format_double(r.episode_return) << ','
     << format_double(r.score) << ',' << csv_quote(r.achievements_json) << ',' << r.unique_states << ','
     << format_double(r.l_pi) << ',' << format_double(r.l_v) << ',' << format_double(r.l_r) << ','
     << format_double(r.l_spr) << ',' << format_double(r.lr) << ',' << format_double(r.wall_time);
  return os.str();
}

inline MetricRow parse_csv_row(const std::vector<std::string>& f) {
  if (f.size() != csv_columns().size())
    throw std::runtime_error("csv: expected " + std::to_string(csv_columns().size()) + " fields, got " +
                             std::to_string(f.size()));
  MetricRow r;
  r.env_step = std::stoll(f[0]);
  r.arm = f[1];
  r.seed = std::stoull(f[2]);
  r.episode_return = std::stod(f[3]);
  r.score = std::stod(f[4]);
  r.achievements_json = f[5];
  r.unique_states = std::stoll(f[6]);
  r.l_pi = std::stod(f[7]);
  r.l_v = std::stod(f[8]);
  r.l_r = std::stod(f[9]);
  r.l_spr = std::stod(f[10]);
  r.lr = std::stod(f[11]);
  r.wall_time = std::stod(f[12]);
  return r;
}

inline std::vector<MetricRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || csv_split(line) != csv_columns())
    throw std::runtime_error(path + ": header does not match the metric schema");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    rows.push_back(parse_csv_row(csv_split(line)));
  }
  return rows;
}

class CsvWriter {
 public:
  CsvWriter() = default;
  // append = true keeps existing rows (resumed runs).
  explicit CsvWriter(const std::string& path, bool append = false) { open(path, append); }

  void open(const std::string& path, bool append = false) {
    std::ifstream probe(path);
    const bool has_content = append && probe && probe.peek() != std::ifstream::traits_type::eof();
    out_.open(path, append ? std::ios::app : std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot write " + path);
    if (!has_content) out_ << csv_header() << '\n';
    out_.flush();
  }
  bool is_open() const { return out_.is_open(); }
  void write(const MetricRow& r) {
    out_ << csv_line(r) << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

inline std::string achievements_json(const std::vector<std::string>& names, const std::vector<double>& rates) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t i = 0; i < names.size() && i < rates.size(); ++i) j[names[i]] = rates[i];
  return j.dump();
}

inline std::vector<double> parse_achievements_json(const std::string& s) {
  auto j = nlohmann::ordered_json::parse(s);
  std::vector<double> out;
  for (auto& [k, v] : j.items()) out.push_back(v.get<double>());
  return out;
}

// ---------------------------------------------------------------------------------------------
// Aggregation across seeds

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean of empty set");
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

struct CurvePoint {
  double step = 0.0, median = 0.0, stddev = 0.0;
};

using Curves = std::map<std::string, std::vector<CurvePoint>>;  // arm -> curve

// Median-over-seeds curve with a std band for one metric, per arm. Rows sharing an env_step are
// aggregated; steps missing for some seed use the seeds that have them.
template <class Get>
Curves aggregate_curves(const std::vector<MetricRow>& rows, Get&& metric) {
  std::map<std::string, std::map<std::int64_t, std::vector<double>>> acc;
  for (const auto& r : rows) acc[r.arm][r.env_step].push_back(metric(r));
  Curves out;
  for (auto& [arm, steps] : acc)
    for (auto& [step, vals] : steps)
      out[arm].push_back({static_cast<double>(step), median(vals), stddev(vals)});
  return out;
}

// Final score of every seed, per arm (taken from each seed's last row).
inline std::map<std::string, std::vector<double>> final_scores(const std::vector<MetricRow>& rows) {
  std::map<std::string, std::map<std::uint64_t, MetricRow>> last;
  for (const auto& r : rows) {
    auto& slot = last[r.arm][r.seed];
    if (r.env_step >= slot.env_step) slot = r;
  }
  std::map<std::string, std::vector<double>> out;
  for (auto& [arm, seeds] : last)
    for (auto& [seed, r] : seeds) out[arm].push_back(r.score);
  return out;
}

inline std::string svg_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    if (c == '<') o += "&lt;";
    else if (c == '>') o += "&gt;";
    else if (c == '&') o += "&amp;";
    else o += c;
  }
  return o;
}

// Line chart: one median line per arm with a translucent +-std band.
inline std::string render_svg(const Curves& curves, const std::string& title, const std::string& ylabel) {
  const double W = 720, H = 440, L = 70, R = 170, T = 40, B = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& [arm, pts] : curves)
    for (const auto& p : pts) {
      xmin = std::min(xmin, p.step);
      xmax = std::max(xmax, p.step);
      ymin = std::min(ymin, p.median - p.stddev);
      ymax = std::max(ymax, p.median + p.stddev);
    }
  if (xmin > xmax) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto X = [&](double x) { return L + (x - xmin) / (xmax - xmin) * (W - L - R); };
  auto Y = [&](double y) { return H - B - (y - ymin) / (ymax - ymin) * (H - T - B); };
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                  "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << svg_escape(title) << "</text>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0, yv = ymin + (ymax - ymin) * i / 4.0;
    os << "<text x=\"" << X(xv) << "\" y=\"" << H - B + 16 << "\" text-anchor=\"middle\">" << format_double(std::round(xv)) << "</text>\n";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", yv);
    os << "<text x=\"" << L - 6 << "\" y=\"" << Y(yv) + 4 << "\" text-anchor=\"end\">" << buf << "</text>\n";
  }
  os << "<text x=\"" << (L + W - R) / 2 << "\" y=\"" << H - 12 << "\" text-anchor=\"middle\">env step</text>\n";
  os << "<text x=\"16\" y=\"" << (T + H - B) / 2 << "\" transform=\"rotate(-90 16 " << (T + H - B) / 2
     << ")\" text-anchor=\"middle\">" << svg_escape(ylabel) << "</text>\n";
  std::size_t ci = 0;
  for (const auto& [arm, pts] : curves) {
    const char* col = palette[ci % 10];
    if (!pts.empty()) {
      os << "<polygon fill=\"" << col << "\" fill-opacity=\"0.18\" stroke=\"none\" points=\"";
      for (const auto& p : pts) os << X(p.step) << ',' << Y(p.median + p.stddev) << ' ';
      for (auto it = pts.rbegin(); it != pts.rend(); ++it) os << X(it->step) << ',' << Y(it->median - it->stddev) << ' ';
      os << "\"/>\n<polyline fill=\"none\" stroke=\"" << col << "\" stroke-width=\"2\" points=\"";
      for (const auto& p : pts) os << X(p.step) << ',' << Y(p.median) << ' ';
      os << "\"/>\n";
    }
    const double ly = T + 18.0 * static_cast<double>(ci);
    os << "<line x1=\"" << W - R + 12 << "\" y1=\"" << ly << "\" x2=\"" << W - R + 36 << "\" y2=\"" << ly
       << "\" stroke=\"" << col << "\" stroke-width=\"3\"/>\n";
    os << "<text x=\"" << W - R + 42 << "\" y=\"" << ly + 4 << "\">" << svg_escape(arm) << "</text>\n";
    ++ci;
  }
  os << "</svg>\n";
  return os.str();
}

}  // namespace mbx

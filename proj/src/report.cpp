#include "qfta/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace qfta {

namespace fs = std::filesystem;

namespace {

std::string fmt(const std::optional<double> &v, int prec = 2) {
  if (!v) return "—";
  std::ostringstream ss;
  ss << std::fixed << std::setprecision(prec) << *v;
  return ss.str();
}

// Mean query over zero successes renders as infinity, matching the usual
// "never succeeds at any budget" convention in results tables.
std::string fmt_query(const std::optional<double> &v) { return v ? fmt(v) : "inf"; }

std::ofstream open_out(const std::string &path) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write report file: " + path);
  return out;
}

std::string csv_escape(const std::string &s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out.push_back(c);
  }
  out += "\"";
  return out;
}

// Original text with its retained prefix wrapped in bold markers.
std::string highlight_prefix(const std::string &text, double prefix_ratio) {
  auto words = split_words(text);
  if (words.empty()) return text;
  const size_t plen = static_cast<size_t>(
      std::ceil(prefix_ratio * static_cast<double>(words.size()) - 1e-12));
  std::string out;
  for (size_t i = 0; i < words.size(); ++i) {
    if (i == 0) out += "**";
    if (i > 0) out.push_back(' ');
    out += words[i];
    if (i + 1 == std::min(plen, words.size())) out += "**";
  }
  return out;
}

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // (x, y)
};

// Minimal static line chart; one polyline per series plus axes and labels.
void write_svg_chart(const std::string &path, const std::string &title,
                     const std::string &x_label, const std::string &y_label,
                     const std::vector<Series> &series) {
  const int w = 640, h = 420, ml = 60, mr = 140, mt = 40, mb = 50;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto &s : series)
    for (const auto &[x, y] : s.points) {
      xmin = std::min(xmin, x); xmax = std::max(xmax, x);
      ymin = std::min(ymin, y); ymax = std::max(ymax, y);
    }
  if (xmin > xmax) { xmin = 0; xmax = 1; }
  if (ymin > ymax) { ymin = 0; ymax = 1; }
  if (xmax - xmin < 1e-12) { xmin -= 0.5; xmax += 0.5; }
  if (ymax - ymin < 1e-12) { ymin -= 0.5; ymax += 0.5; }
  auto sx = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto sy = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };

  static const char *colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"};
  auto out = open_out(path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
      << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"15\">"
      << title << "</text>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\""
      << h - mb << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb
      << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0;
    const double yv = ymin + (ymax - ymin) * i / 4.0;
    out << "<text x=\"" << sx(xv) << "\" y=\"" << h - mb + 18
        << "\" text-anchor=\"middle\">" << std::fixed << std::setprecision(2) << xv
        << "</text>\n";
    out << "<text x=\"" << ml - 8 << "\" y=\"" << sy(yv) + 4
        << "\" text-anchor=\"end\">" << std::setprecision(1) << yv << "</text>\n";
  }
  out << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 10
      << "\" text-anchor=\"middle\">" << x_label << "</text>\n";
  out << "<text x=\"16\" y=\"" << (mt + h - mb) / 2
      << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 " << (mt + h - mb) / 2
      << ")\">" << y_label << "</text>\n";
  for (size_t si = 0; si < series.size(); ++si) {
    const char *color = colors[si % 5];
    out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
    for (const auto &[x, y] : series[si].points) out << sx(x) << "," << sy(y) << " ";
    out << "\"/>\n";
    for (const auto &[x, y] : series[si].points)
      out << "<circle cx=\"" << sx(x) << "\" cy=\"" << sy(y) << "\" r=\"3\" fill=\"" << color
          << "\"/>\n";
    out << "<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 16 * (si + 1) << "\" fill=\""
        << color << "\">" << series[si].label << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace

void emit_report(const ExperimentReport &report, const std::string &dir) {
  fs::create_directories(dir);
  const MetricsReport &m = report.metrics;
  const std::string dataset = report.cfg.victim.dataset;
  const std::string attacker = report.results.empty() ? "kv-steer"
                                                      : report.results.front().attacker_id;
  const std::string victim_id =
      report.results.empty() ? "" : report.results.front().victim_id;

  {
    auto out = open_out(dir + "/report.md");
    out << "# Attack run report\n\n";
    out << "- config digest: `" << report.config_digest << "`\n";
    out << "- dataset: " << dataset << " (surrogate trained on "
        << report.cfg.surrogate_dataset() << ")\n";
    out << "- victim: " << victim_id << "\n";
    out << "- examples: " << m.n_total << " sampled, " << m.n_eligible << " eligible, "
        << m.n_ineligible << " ineligible, " << m.n_errored << " errored\n";
    out << "- max generator forward passes per example: " << report.max_forward_passes
        << "\n\n";

    if (!m.asr) {
      out << "**No eligible trials — no attack metrics can be reported.**\n";
      return;
    }

    out << "## Efficiency\n\n";
    out << "| Dataset | Victim | Attacker | ASR (%) | Query |\n";
    out << "|---|---|---|---|---|\n";
    out << "| " << dataset << " | " << victim_id << " | " << attacker << " | " << fmt(m.asr)
        << " | " << fmt_query(m.mean_query) << " |\n\n";

    out << "## Quality (successful attacks only)\n\n";
    out << "| Attacker | USE | PPL | dI |\n";
    out << "|---|---|---|---|\n";
    out << "| " << attacker << " | " << fmt(m.use_mean) << " | " << fmt(m.ppl_mean) << " | "
        << fmt(m.delta_i_mean) << " |\n";
    if (m.ppl_clamped) out << "\n(some per-token NLL values hit the overflow clamp)\n";

    out << "\n## Examples\n\n";
    out << "Retained prefix shown in bold.\n\n";
    int shown = 0;
    for (const auto &r : report.results) {
      if (!r.success || shown >= 10) continue;
      out << "**Original:** " << highlight_prefix(r.original, report.cfg.attack.prefix_ratio)
          << "\n\n";
      out << "**Adversarial:** "
          << highlight_prefix(r.adversarial, report.cfg.attack.prefix_ratio) << "\n\n---\n\n";
      ++shown;
    }
    if (shown == 0) out << "(no successful attacks to show)\n";
  }

  {
    auto out = open_out(dir + "/results.csv");
    out << "example_id,eligible,success,errored,queries_attack_loop,queries_total,"
           "use_similarity,perplexity,delta_i\n";
    for (const auto &r : report.results) {
      out << csv_escape(r.example_id) << "," << r.eligible << "," << r.success << ","
          << r.errored << "," << r.queries_attack_loop << "," << r.queries_total << ","
          << (r.use_similarity ? std::to_string(*r.use_similarity) : "") << ","
          << (r.perplexity ? std::to_string(*r.perplexity) : "") << ","
          << (r.delta_i ? std::to_string(*r.delta_i) : "") << "\n";
    }
  }

  {
    // One row per (dataset, attacker) cell.
    auto out = open_out(dir + "/summary.csv");
    out << "dataset,attacker,victim,asr,query,use,ppl,delta_i\n";
    out << csv_escape(dataset) << "," << csv_escape(attacker) << "," << csv_escape(victim_id)
        << "," << fmt(m.asr) << "," << fmt_query(m.mean_query) << "," << fmt(m.use_mean)
        << "," << fmt(m.ppl_mean) << "," << fmt(m.delta_i_mean) << "\n";
  }
}

void emit_sweep_report(const std::vector<SweepPoint> &points, const std::string &dir) {
  fs::create_directories(dir);
  {
    auto out = open_out(dir + "/sweep.csv");
    out << "lambda,ratio,asr,use,errored,error\n";
    for (const auto &p : points)
      out << p.lambda << "," << p.ratio << "," << fmt(p.asr) << "," << fmt(p.use_mean, 4)
          << "," << p.errored << "," << csv_escape(p.error) << "\n";
  }
  {
    auto out = open_out(dir + "/sweep.md");
    out << "# Ablation sweep\n\n| lambda | r | ASR (%) | USE |\n|---|---|---|---|\n";
    for (const auto &p : points) {
      out << "| " << p.lambda << " | " << p.ratio << " | "
          << (p.errored ? "error" : fmt(p.asr)) << " | "
          << (p.errored ? csv_escape(p.error) : fmt(p.use_mean, 4)) << " |\n";
    }
  }
  Series asr{"ASR (%)", {}}, use{"USE x 100", {}};
  for (const auto &p : points) {
    if (p.errored) continue;
    if (p.asr) asr.points.emplace_back(p.ratio, *p.asr);
    if (p.use_mean) use.points.emplace_back(p.ratio, *p.use_mean * 100.0);
  }
  auto by_x = [](const auto &a, const auto &b) { return a.first < b.first; };
  std::sort(asr.points.begin(), asr.points.end(), by_x);
  std::sort(use.points.begin(), use.points.end(), by_x);
  write_svg_chart(dir + "/sweep.svg", "ASR/USE trade-off vs prefix ratio", "prefix ratio r",
                  "value", {asr, use});
}

void emit_budget_report(const std::vector<BudgetPoint> &points, const std::string &dir) {
  fs::create_directories(dir);
  {
    auto out = open_out(dir + "/budget.csv");
    out << "attacker,budget,asr,n_eligible\n";
    for (const auto &p : points)
      out << csv_escape(p.attacker_id) << "," << p.budget << "," << fmt(p.asr) << ","
          << p.n_eligible << "\n";
  }
  std::vector<Series> series;
  for (const auto &p : points) {
    auto it = std::find_if(series.begin(), series.end(),
                           [&](const Series &s) { return s.label == p.attacker_id; });
    if (it == series.end()) {
      series.push_back({p.attacker_id, {}});
      it = series.end() - 1;
    }
    if (p.asr) it->points.emplace_back(static_cast<double>(p.budget), *p.asr);
  }
  for (auto &s : series)
    std::sort(s.points.begin(), s.points.end(),
              [](const auto &a, const auto &b) { return a.first < b.first; });
  write_svg_chart(dir + "/budget.svg", "ASR vs query budget", "query budget", "ASR (%)",
                  series);
}

void emit_transfer_report(const TransferMatrix &m, const std::string &dir) {
  fs::create_directories(dir);
  {
    auto out = open_out(dir + "/transfer.csv");
    out << "dataset,model,asr,difference_ratio\n";
    for (const auto &ds : m.datasets)
      for (const auto &spec : m.model_ids)
        out << csv_escape(ds) << "," << csv_escape(spec) << ","
            << fmt(m.asr.at(ds).at(spec)) << "," << fmt(m.cells.at(ds).at(spec), 4) << "\n";
  }
  {
    auto out = open_out(dir + "/transfer.md");
    out << "# Transferability (difference ratio vs reference " << m.reference_id << ")\n\n";
    out << "| dataset |";
    for (const auto &spec : m.model_ids) out << " " << spec << " |";
    out << "\n|---|";
    for (size_t i = 0; i < m.model_ids.size(); ++i) out << "---|";
    out << "\n";
    for (const auto &ds : m.datasets) {
      out << "| " << ds << " |";
      for (const auto &spec : m.model_ids) out << " " << fmt(m.cells.at(ds).at(spec), 4) << " |";
      out << "\n";
    }
  }
  std::vector<Series> series;
  for (size_t di = 0; di < m.datasets.size(); ++di) {
    Series s{m.datasets[di], {}};
    for (size_t mi = 0; mi < m.model_ids.size(); ++mi) {
      const auto cell = m.cells.at(m.datasets[di]).at(m.model_ids[mi]);
      if (cell) s.points.emplace_back(static_cast<double>(mi), *cell);
    }
    series.push_back(std::move(s));
  }
  write_svg_chart(dir + "/transfer.svg", "ASR difference ratio per victim (x = model index)",
                  "victim model index", "difference ratio", series);
}

}  // namespace qfta

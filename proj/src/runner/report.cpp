#include <array>
#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <tuple>

#include "tedm/checkpoint.hpp"
#include "tedm/runner/pipeline.hpp"

namespace fs = std::filesystem;

namespace tedm::runner {

namespace {

std::string fmt(const char* spec, double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

constexpr const char* kCsvHeader = "model,n_train,domain,metric,mean,std,p_vs_best,bold";

std::string to_csv(const std::vector<eval::SummaryRow>& rows) {
  std::string out = std::string(kCsvHeader) + "\n";
  for (const auto& r : rows)
    out += r.model + "," + std::to_string(r.n_train) + "," + r.domain + "," + r.metric + "," + fmt("%.6f", r.mean) +
           "," + fmt("%.6f", r.std) + "," + fmt("%.6g", r.p_vs_best) + "," + (r.bold ? "1" : "0") + "\n";
  return out;
}

std::string to_text(const std::vector<eval::SummaryRow>& rows) {
  std::vector<std::array<std::string, 7>> cells;
  cells.push_back({"model", "n_train", "domain", "metric", "mean +- std", "p_vs_best", "bold"});
  for (const auto& r : rows)
    cells.push_back({r.model, std::to_string(r.n_train), r.domain, r.metric,
                     fmt("%.4f", r.mean) + " +- " + fmt("%.4f", r.std), r.best ? "-" : fmt("%.4g", r.p_vs_best),
                     r.bold ? "*" : ""});
  std::array<std::size_t, 7> width{};
  for (const auto& row : cells)
    for (std::size_t i = 0; i < 7; ++i) width[i] = std::max(width[i], row[i].size());
  std::string out;
  for (std::size_t r = 0; r < cells.size(); ++r) {
    std::string line;
    for (std::size_t i = 0; i < 7; ++i) {
      const auto& c = cells[r][i];
      const bool numeric = i == 1 || i == 4 || i == 5;
      const std::string pad(width[i] - c.size(), ' ');
      line += (i ? "  " : "") + (numeric ? pad + c : c + pad);
    }
    while (!line.empty() && line.back() == ' ') line.pop_back();
    out += line + "\n";
    if (r == 0) {
      std::size_t total = 0;
      for (auto w : width) total += w;
      out += std::string(total + 12, '-') + "\n";
    }
  }
  return out;
}

// One panel per domain, probe step on a categorical x-axis, one line per
// training size.
std::string to_svg(const std::vector<eval::SummaryRow>& rows, const std::vector<std::size_t>& steps,
                   const std::vector<std::size_t>& sizes) {
  const std::vector<std::string> domains{"in", "shift_classifier", "shift_both"};
  const char* palette[] = {"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666"};
  const double pw = 260, ph = 200, left = 50, top = 40, gap = 40;
  const double width = left + domains.size() * (pw + gap) + 90, height = top + ph + 70;
  std::map<std::tuple<std::string, std::size_t, std::size_t>, double> mean;  // domain, size, step
  for (const auto& r : rows)
    if (r.model.rfind("probe@", 0) == 0 && r.metric.rfind("dice", 0) == 0)
      mean[{r.domain, r.n_train, std::stoul(r.model.substr(6))}] = r.mean;

  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  auto x_of = [&](std::size_t panel, std::size_t i) {
    const double frac = steps.size() > 1 ? static_cast<double>(i) / static_cast<double>(steps.size() - 1) : 0.5;
    return left + panel * (pw + gap) + 10 + frac * (pw - 20);
  };
  auto y_of = [&](double dice) { return top + ph - dice * ph; };
  for (std::size_t p = 0; p < domains.size(); ++p) {
    const double x0 = left + p * (pw + gap);
    svg << "<g class=\"panel\" data-domain=\"" << domains[p] << "\">\n";
    svg << "<text x=\"" << fmt("%.1f", x0 + pw / 2) << "\" y=\"" << top - 12 << "\" text-anchor=\"middle\">"
        << domains[p] << "</text>\n";
    svg << "<rect x=\"" << x0 << "\" y=\"" << top << "\" width=\"" << pw << "\" height=\"" << ph
        << "\" fill=\"none\" stroke=\"black\"/>\n";
    for (int k = 0; k <= 4; ++k) {
      const double v = k / 4.0;
      svg << "<text class=\"ytick\" x=\"" << x0 - 4 << "\" y=\"" << fmt("%.1f", y_of(v) + 4)
          << "\" text-anchor=\"end\">" << fmt("%.2f", v) << "</text>\n";
    }
    for (std::size_t i = 0; i < steps.size(); ++i)
      svg << "<text class=\"xtick\" x=\"" << fmt("%.1f", x_of(p, i)) << "\" y=\"" << top + ph + 14
          << "\" text-anchor=\"middle\">" << steps[i] << "</text>\n";
    svg << "<text x=\"" << fmt("%.1f", x0 + pw / 2) << "\" y=\"" << top + ph + 32
        << "\" text-anchor=\"middle\">diffusion step</text>\n";
    for (std::size_t s = 0; s < sizes.size(); ++s) {
      std::string points;
      for (std::size_t i = 0; i < steps.size(); ++i) {
        const auto it = mean.find({domains[p], sizes[s], steps[i]});
        if (it == mean.end()) continue;
        points += fmt("%.2f", x_of(p, i)) + "," + fmt("%.2f", y_of(it->second)) + " ";
      }
      if (points.empty()) continue;
      points.pop_back();
      svg << "<polyline data-n=\"" << sizes[s] << "\" fill=\"none\" stroke=\"" << palette[s % 8]
          << "\" stroke-width=\"1.5\" points=\"" << points << "\"/>\n";
    }
    svg << "</g>\n";
  }
  svg << "<text x=\"14\" y=\"" << fmt("%.1f", top + ph / 2) << "\" transform=\"rotate(-90 14 "
      << fmt("%.1f", top + ph / 2) << ")\" text-anchor=\"middle\">Dice</text>\n";
  const double lx = left + domains.size() * (pw + gap);
  for (std::size_t s = 0; s < sizes.size(); ++s) {
    const double ly = top + 10 + 16 * s;
    svg << "<line x1=\"" << lx << "\" y1=\"" << ly << "\" x2=\"" << lx + 18 << "\" y2=\"" << ly << "\" stroke=\""
        << palette[s % 8] << "\" stroke-width=\"1.5\"/>\n";
    svg << "<text x=\"" << lx + 22 << "\" y=\"" << ly + 4 << "\">n=" << sizes[s] << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::vector<eval::MetricRecord> keep(const std::vector<eval::MetricRecord>& in, const std::string& prefix,
                                     bool match) {
  std::vector<eval::MetricRecord> out;
  for (const auto& r : in)
    if ((r.metric.rfind(prefix, 0) == 0) == match) out.push_back(r);
  return out;
}

}  // namespace

std::vector<eval::MetricRecord> read_metric_records(const fs::path& csv) {
  std::istringstream in(read_file(csv.string()));
  std::string line;
  require(std::getline(in, line) && line == "model,n_train,domain,metric,image_id,value", ErrorCode::kManifestError,
          "unexpected metrics header in " + csv.string());
  std::vector<eval::MetricRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    eval::MetricRecord r;
    std::string n, id, v;
    const bool ok = std::getline(ls, r.model, ',') && std::getline(ls, n, ',') && std::getline(ls, r.domain, ',') &&
                    std::getline(ls, r.metric, ',') && std::getline(ls, id, ',') && std::getline(ls, v);
    require(ok, ErrorCode::kManifestError, "malformed metrics row: " + line);
    try {
      r.n_train = std::stoul(n);
      r.image_id = std::stoul(id);
      r.value = std::stod(v);
    } catch (const std::exception&) {
      fail(ErrorCode::kManifestError, "malformed metrics row: " + line);
    }
    out.push_back(std::move(r));
  }
  return out;
}

std::vector<std::string> emit_report(const RunManifest& manifest, const fs::path& run_dir, const fs::path& dir,
                                     ReportFormat format) {
  require(manifest.complete_through(Stage::kEvaluate), ErrorCode::kManifestError,
          "manifest has no completed evaluate stage");
  const auto* ev = manifest.find(stage_name(Stage::kEvaluate));
  const std::string eval_dir = stage_dir(Stage::kEvaluate);
  for (const char* f : {"metrics.csv", "probe_metrics.csv"}) {
    const std::string rel = eval_dir + "/" + f;
    require(std::any_of(ev->artifacts.begin(), ev->artifacts.end(), [&](const Artifact& a) { return a.path == rel; }),
            ErrorCode::kManifestError, "manifest lacks " + rel);
  }
  const auto cfg = parse_config(manifest.config_text);
  eval::AggregateOptions opts{cfg.alpha, static_cast<std::size_t>(cfg.n_classes() - 1)};

  const auto records = read_metric_records(run_dir / eval_dir / "metrics.csv");
  const auto probe_records = keep(read_metric_records(run_dir / eval_dir / "probe_metrics.csv"), "dice", true);
  const auto summary = eval::aggregate_results(keep(records, "dice", true), opts);
  const auto pr = eval::aggregate_results(keep(records, "dice", false), opts);
  auto probes = eval::aggregate_results(probe_records, opts);
  // probe@25 after probe@10, not after probe@200
  auto step_of = [](const eval::SummaryRow& r) { return std::stoul(r.model.substr(r.model.find('@') + 1)); };
  std::sort(probes.begin(), probes.end(), [&](const eval::SummaryRow& a, const eval::SummaryRow& b) {
    return std::make_tuple(a.metric, a.domain, a.n_train, step_of(a)) <
           std::make_tuple(b.metric, b.domain, b.n_train, step_of(b));
  });

  std::error_code ec;
  fs::create_directories(dir, ec);
  require(!ec, ErrorCode::kStorageError, "cannot create " + dir.string());
  std::vector<std::pair<std::string, std::string>> files;
  switch (format) {
    case ReportFormat::kCsv:
      files = {{"summary.csv", to_csv(summary)}, {"precision_recall.csv", to_csv(pr)}, {"probes.csv", to_csv(probes)}};
      break;
    case ReportFormat::kText:
      files = {{"summary.txt", to_text(summary)}, {"precision_recall.txt", to_text(pr)}, {"probes.txt", to_text(probes)}};
      break;
    case ReportFormat::kSvg: {
      std::vector<std::size_t> steps = cfg.probe_steps;
      std::sort(steps.begin(), steps.end());
      files = {{"probe_curves.svg", to_svg(probes, steps, cfg.resolved_sizes())}};
      break;
    }
  }
  std::vector<std::string> names;
  for (const auto& [name, body] : files) {
    write_file_atomic((dir / name).string(), body);
    names.push_back(name);
  }
  return names;
}

}  // namespace tedm::runner

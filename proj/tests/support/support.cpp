#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "halludet/synthetic.hpp"

namespace testsupport {

using namespace halludet;

TempDir::TempDir() {
  std::string tmpl = (fs::temp_directory_path() / "halludet-test-XXXXXX").string();
  if (!mkdtemp(tmpl.data())) throw std::runtime_error("mkdtemp failed");
  path_ = tmpl;
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

MockFleet::MockFleet(const std::vector<std::uint64_t>& seeds, double accuracy) {
  for (auto seed : seeds) {
    MockRule rule;
    rule.mode = MockRule::Mode::oracle;
    rule.oracle_accuracy = accuracy;
    rule.oracle_seed = seed;
    auto s = std::make_unique<MockServer>(rule);
    s->start("127.0.0.1", 0);
    servers_.push_back(std::move(s));
  }
}

std::size_t MockFleet::total_requests() const {
  std::size_t n = 0;
  for (const auto& s : servers_) n += s->request_count();
  return n;
}

ModelEndpoint endpoint(const std::string& model, const std::string& url, int retries) {
  ModelEndpoint e;
  e.model_id = model;
  e.base_url = url;
  e.max_retries = retries;
  e.backoff_base = std::chrono::milliseconds(1);
  e.request_timeout = std::chrono::milliseconds(10000);
  return e;
}

DataPoint point(const std::string& id, Task task, std::optional<Label> label, std::string src,
                std::string tgt, std::string hyp) {
  DataPoint p;
  p.id = id;
  p.task = task;
  p.src = std::move(src);
  p.tgt = std::move(tgt);
  p.hyp = std::move(hyp);
  p.gold_label = label;
  return p;
}

std::vector<double> rank_oracle(const std::vector<double>& v) {
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double less = 0, equal = 0;
    for (std::size_t j = 0; j < v.size(); ++j) {
      if (v[j] < v[i]) less += 1;
      if (v[j] == v[i]) equal += 1;
    }
    r[i] = less + (equal + 1.0) / 2.0;
  }
  return r;
}

double pearson_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
  }
  const double mx = sx / n, my = sy / n;
  double cov = 0, vx = 0, vy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    cov += (x[i] - mx) * (y[i] - my);
    vx += (x[i] - mx) * (x[i] - mx);
    vy += (y[i] - my) * (y[i] - my);
  }
  return cov / std::sqrt(vx * vy);
}

double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  return pearson_oracle(rank_oracle(x), rank_oracle(y));
}

std::vector<double> linear_oracle(const std::vector<std::vector<double>>& xs, const std::vector<double>& w) {
  double total = 0;
  for (double v : w) total += v;
  std::vector<double> out(xs.front().size(), 0.0);
  for (std::size_t j = 0; j < out.size(); ++j) {
    double acc = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) acc += w[i] * xs[i][j];
    out[j] = acc / total;
  }
  return out;
}

std::vector<double> slerp_oracle(const std::vector<double>& a, const std::vector<double>& b, double t) {
  double na = 0, nb = 0;
  for (double v : a) na += v * v;
  for (double v : b) nb += v * v;
  na = std::sqrt(na);
  nb = std::sqrt(nb);
  std::vector<double> out(a.size());
  auto lerp = [&] {
    for (std::size_t j = 0; j < a.size(); ++j) out[j] = (1 - t) * a[j] + t * b[j];
    return out;
  };
  if (na == 0 || nb == 0) return lerp();
  // Angle via atan2 of the orthogonal and parallel components of the unit vectors.
  double c = 0;
  for (std::size_t j = 0; j < a.size(); ++j) c += (a[j] / na) * (b[j] / nb);
  double perp = 0;
  for (std::size_t j = 0; j < a.size(); ++j) {
    const double d = b[j] / nb - c * (a[j] / na);
    perp += d * d;
  }
  const double omega = std::atan2(std::sqrt(perp), c);
  const double s = std::sin(omega);
  if (s < 1e-7) return lerp();
  for (std::size_t j = 0; j < a.size(); ++j) {
    out[j] = std::sin((1 - t) * omega) / s * a[j] + std::sin(t * omega) / s * b[j];
  }
  return out;
}

std::vector<double> ties_oracle(const std::vector<double>& base, const std::vector<std::vector<double>>& xs,
                                double density, double lambda) {
  const std::size_t n = base.size();
  const auto k = static_cast<std::size_t>(std::ceil(density * static_cast<double>(n) - 1e-9));
  std::vector<std::vector<double>> trimmed;
  for (const auto& x : xs) {
    std::vector<double> tau(n);
    for (std::size_t j = 0; j < n; ++j) tau[j] = x[j] - base[j];
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t p, std::size_t q) { return std::abs(tau[p]) > std::abs(tau[q]); });
    std::vector<double> tr(n, 0.0);
    for (std::size_t r = 0; r < std::min(k, n); ++r) tr[idx[r]] = tau[idx[r]];
    trimmed.push_back(tr);
  }
  std::vector<double> out(n);
  for (std::size_t j = 0; j < n; ++j) {
    double total = 0;
    for (const auto& tr : trimmed) total += tr[j];
    double merged = 0;
    if (total != 0) {
      double sum = 0;
      int count = 0;
      for (const auto& tr : trimmed) {
        if (tr[j] != 0 && (tr[j] > 0) == (total > 0)) {
          sum += tr[j];
          ++count;
        }
      }
      if (count) merged = sum / count;
    }
    out[j] = base[j] + lambda * merged;
  }
  return out;
}

std::optional<Label> unanimity_oracle(const std::vector<std::optional<Label>>& labels) {
  if (labels.empty()) return std::nullopt;
  for (const auto& l : labels) {
    if (!l || *l != *labels.front()) return std::nullopt;
  }
  return labels.front();
}

std::map<std::string, std::vector<std::uint64_t>> random_schema(std::mt19937_64& rng, std::size_t max_numel) {
  std::map<std::string, std::vector<std::uint64_t>> schema;
  const int tensors = std::uniform_int_distribution<int>(1, 4)(rng);
  for (int i = 0; i < tensors; ++i) {
    std::vector<std::uint64_t> shape;
    if (std::uniform_int_distribution<int>(0, 1)(rng)) {
      shape = {std::uniform_int_distribution<std::uint64_t>(1, max_numel)(rng)};
    } else {
      const auto rows = std::uniform_int_distribution<std::uint64_t>(1, 64)(rng);
      const auto cols = std::uniform_int_distribution<std::uint64_t>(1, std::max<std::uint64_t>(1, max_numel / rows))(rng);
      shape = {rows, cols};
    }
    schema["layer" + std::to_string(i) + ".weight"] = shape;
  }
  return schema;
}

TensorCheckpoint random_checkpoint(std::mt19937_64& rng,
                                   const std::map<std::string, std::vector<std::uint64_t>>& schema) {
  std::normal_distribution<float> nd(0.0f, 1.0f);
  TensorCheckpoint c;
  for (const auto& [name, shape] : schema) {
    Tensor t;
    t.shape = shape;
    t.dtype = DType::F32;
    t.values.resize(shape_product(shape));
    for (auto& v : t.values) v = nd(rng);
    c.tensors[name] = std::move(t);
  }
  return c;
}

std::vector<double> as_doubles(const Tensor& t) { return {t.values.begin(), t.values.end()}; }

double max_rel_error(const std::vector<double>& expected, const std::vector<double>& actual) {
  double worst = 0;
  for (std::size_t i = 0; i < expected.size(); ++i) {
    const double denom = std::max(std::abs(expected[i]), 1e-6);
    worst = std::max(worst, std::abs(expected[i] - actual[i]) / denom);
  }
  return worst;
}

PipelineFixture write_pipeline_fixture(const fs::path& dir, const MockFleet& fleet, std::size_t unlabeled,
                                       std::size_t validation, std::size_t test, std::size_t concurrency) {
  PipelineFixture f;
  f.data_dir = dir / "data";
  f.run_root = dir / "runs";
  f.config = dir / "run.toml";

  SyntheticOptions opts;
  opts.trial = 80;
  opts.unlabeled = unlabeled;
  opts.validation = validation;
  opts.test = test;
  opts.seed = 11;
  write_synthetic(make_synthetic(opts), f.data_dir);

  std::ostringstream os;
  os << "[run]\nconcurrency = " << concurrency << "\nroot = \"runs\"\n\n";
  os << "[paths]\ntrial = \"data/trial.json\"\nunlabeled = \"data/unlabeled.json\"\n"
     << "validation = \"data/validation.json\"\n";
  if (test) os << "test = \"data/test.json\"\n";
  os << "\n[seeds]\ndemos = 5\nbalance = 9\n\n";
  for (std::size_t i = 0; i < fleet.size(); ++i) {
    os << "[[endpoints]]\nmodel_id = \"m" << i << "\"\nbase_url = \"" << fleet.url(i)
       << "\"\nmax_retries = 1\nbackoff_ms = 1\n\n";
  }
  os << "[[param_sets]]\nid = \"greedy\"\ntemperature = 0.0\nlogprob_mode = true\n\n"
     << "[[param_sets]]\nid = \"warm\"\ntemperature = 0.7\ntop_p = 0.9\nlogprob_mode = true\n\n";
  os << "[sweep]\nvariants = [\"naive\", \"ours\"]\nshots = [0, 2, 4]\n\n";
  os << "[consistency]\nparams = [\"greedy\", \"warm\"]\n\n";
  os << "[vote]\nparams = \"greedy\"\nstep = 0.1\n\n";
  os << "[training]\nmethod = \"lora\"\nlora_rank = 32\nlearning_rate = 3e-5\n";
  std::ofstream(f.config) << os.str();
  return f;
}

}  // namespace testsupport

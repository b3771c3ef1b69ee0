#include "saliency/perturbation.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <random>

#include "saliency/parallel.hpp"
#include "saliency/training.hpp"

namespace saliency {

void PerturbConfig::validate() const {
  if (!(step_fraction > 0.0 && step_fraction <= 1.0)) {
    throw std::invalid_argument("step fraction must lie in (0, 1], got " + format_number(step_fraction));
  }
  if (!(max_fraction > 0.0 && max_fraction <= 1.0)) {
    throw std::invalid_argument("max fraction must lie in (0, 1], got " + format_number(max_fraction));
  }
}

std::vector<std::size_t> removal_order(const Tensor& saliency, Direction direction) {
  std::vector<std::size_t> order(saliency.size());
  std::iota(order.begin(), order.end(), 0);
  if (direction == Direction::least_first) {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return saliency[a] < saliency[b]; });
  } else {
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return saliency[a] > saliency[b]; });
  }
  return order;
}

namespace {

double norm_ratio_e(const Tensor& xs, double x_norm) { return 1.0 - xs.norm() / x_norm; }

}  // namespace

PerturbResult perturb_until_flip(const Checkpoint& ckpt, const Tensor& x, const Tensor& saliency,
                                 const PerturbConfig& config, bool record_trajectory) {
  config.validate();
  const ActivationShape in = ckpt.spec.input;
  const Tensor image = as_batch(x, in);
  if (image.dim(0) != 1) throw ShapeError("perturbation takes one image, got " + shape_string(image.shape()));
  if (saliency.rank() != 2 || saliency.dim(0) != in.height || saliency.dim(1) != in.width) {
    throw ShapeError("saliency " + shape_string(saliency.shape()) + " does not match image extents " +
                     shape_string({in.height, in.width}));
  }
  const double x_norm = image.norm();
  if (x_norm == 0.0) throw std::invalid_argument("image has zero norm; removal fraction is undefined");

  const std::size_t pixels = in.height * in.width;
  const std::size_t batch = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(config.step_fraction * pixels)));
  const std::size_t limit = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(config.max_fraction * pixels)));
  const std::size_t original = argmax_row(forward_logits(ckpt, image));
  const std::vector<std::size_t> order = removal_order(saliency, config.direction);

  PerturbResult result;
  Tensor current = image;
  std::size_t removed = 0;
  std::size_t chunk = 1;
  // Steps are evaluated in growing batches so late flips cost few forward calls.
  while (removed < limit) {
    std::vector<Tensor> states;
    for (std::size_t k = 0; k < chunk && removed < limit; ++k) {
      const std::size_t end = std::min(limit, removed + batch);
      for (; removed < end; ++removed) {
        for (std::size_t ch = 0; ch < in.channels; ++ch) current[ch * pixels + order[removed]] = config.removal_value;
      }
      states.push_back(current);
    }
    Tensor stacked({states.size(), in.channels, in.height, in.width});
    for (std::size_t k = 0; k < states.size(); ++k) {
      std::copy(states[k].data().begin(), states[k].data().end(),
                stacked.data().begin() + static_cast<long>(k * image.size()));
    }
    const Tensor logits = forward_logits(ckpt, stacked);
    for (std::size_t k = 0; k < states.size(); ++k) {
      ++result.steps;
      const double e = norm_ratio_e(states[k], x_norm);
      if (record_trajectory) result.trajectory.push_back(e);
      if (argmax_row(logits, k) != original) {
        result.e = e;
        result.flipped = true;
        return result;
      }
    }
    chunk = std::min<std::size_t>(chunk * 2, 16);
  }
  result.e = 1.0;
  result.flipped = false;
  return result;
}

NoisePool NoisePool::excluding(std::size_t image_id) const {
  NoisePool out;
  for (const PoolEntry& entry : entries_) {
    if (entry.image_id != image_id) out.entries_.push_back(entry);
  }
  return out;
}

std::vector<std::size_t> draw_distinct(std::size_t n, std::size_t count, std::uint64_t seed) {
  if (count > n) throw std::invalid_argument("cannot draw " + std::to_string(count) + " distinct items from " + std::to_string(n));
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < count; ++i) std::swap(idx[i], idx[i + rng() % (n - i)]);
  idx.resize(count);
  return idx;
}

double noise_reference(const Checkpoint& ckpt, const Tensor& x, const NoisePool& pool, const PerturbConfig& config,
                       std::size_t draws, std::uint64_t seed) {
  if (pool.size() == 0) throw std::invalid_argument("noise pool is empty");
  if (draws == 0) throw std::invalid_argument("noise reference needs at least one draw");
  if (pool.size() < draws) {
    throw InsufficientDataError("noise pool holds " + std::to_string(pool.size()) + " maps, fewer than " +
                                std::to_string(draws) + " draws");
  }
  // Running mean: a pool of identical maps reproduces their e exactly.
  double mean = 0.0;
  std::size_t k = 0;
  for (std::size_t i : draw_distinct(pool.size(), draws, seed)) {
    mean += (perturb_until_flip(ckpt, x, pool.entries()[i].map, config).e - mean) / static_cast<double>(++k);
  }
  return mean;
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t id) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (id + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Tensor uniform_random_map(std::size_t height, std::size_t width, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor out({height, width});
  for (double& v : out.data()) v = static_cast<double>(rng() >> 11) * 0x1.0p-53;
  return out;
}

Tensor shuffled_pixels(const Tensor& map, std::uint64_t seed) {
  Tensor out = map;
  std::mt19937_64 rng(seed);
  for (std::size_t i = out.size(); i > 1; --i) std::swap(out[i - 1], out[rng() % i]);
  return out;
}

namespace {

EvalRecord evaluate_one(const Checkpoint& ckpt, const Tensor& x, std::size_t id, const std::string& name,
                        const Tensor& map, const NoisePool& pool, const EvalOptions& options) {
  EvalRecord r;
  r.image_id = id;
  r.method = name;
  PerturbConfig minus = options.perturb, plus = options.perturb;
  minus.direction = Direction::least_first;
  plus.direction = Direction::most_first;
  const PerturbResult em = perturb_until_flip(ckpt, x, map, minus);
  const PerturbResult ep = perturb_until_flip(ckpt, x, map, plus);
  r.e_minus = em.e;
  r.e_plus = ep.e;
  r.e_delta = r.e_minus - r.e_plus;
  r.flipped_minus = em.flipped;
  r.flipped_plus = ep.flipped;
  r.steps_minus = em.steps;
  r.steps_plus = ep.steps;
  const NoisePool others = pool.excluding(id);
  const std::uint64_t seed = derive_seed(options.seed, id);
  r.exi_minus = noise_reference(ckpt, x, others, minus, options.draws, seed);
  r.exi_plus = noise_reference(ckpt, x, others, plus, options.draws, seed);
  r.de_minus = r.e_minus - r.exi_minus;
  r.de_plus = r.e_plus - r.exi_plus;
  r.de_delta = r.de_minus - r.de_plus;
  return r;
}

EvalRecord failed_record(std::size_t id, const std::string& name, const std::string& what) {
  const double nan = std::numeric_limits<double>::quiet_NaN();
  EvalRecord r;
  r.image_id = id;
  r.method = name;
  r.e_minus = r.e_plus = r.e_delta = r.exi_minus = r.exi_plus = r.de_minus = r.de_plus = r.de_delta = nan;
  r.error = what;
  return r;
}

}  // namespace

std::vector<EvalRecord> evaluate_maps(const Checkpoint& ckpt, const Dataset& data,
                                      std::span<const std::size_t> image_ids, const std::string& name,
                                      const std::vector<Tensor>& maps, const EvalOptions& options) {
  if (maps.size() != image_ids.size()) throw std::invalid_argument("one map per evaluated image is required");
  options.perturb.validate();
  NoisePool pool;
  for (std::size_t i = 0; i < image_ids.size(); ++i) {
    if (!maps[i].empty()) pool.add(image_ids[i], maps[i]);
  }
  std::vector<EvalRecord> records(image_ids.size());
  parallel_for(image_ids.size(), options.workers, [&](std::size_t i) {
    const std::size_t id = image_ids[i];
    if (maps[i].empty()) {
      records[i] = failed_record(id, name, "no saliency map");
      return;
    }
    try {
      records[i] = evaluate_one(ckpt, data.image(id), id, name, maps[i], pool, options);
    } catch (const std::exception& err) {
      records[i] = failed_record(id, name, err.what());
    }
  });
  return records;
}

std::vector<EvalRecord> evaluate_method(const Checkpoint& ckpt, const Dataset& data,
                                        std::span<const std::size_t> image_ids, const std::string& name,
                                        const SaliencyMethod& method, const EvalOptions& options) {
  std::vector<Tensor> maps(image_ids.size());
  parallel_for(image_ids.size(), options.workers, [&](std::size_t i) {
    try {
      maps[i] = method(data.image(image_ids[i]), image_ids[i]);
    } catch (const std::exception&) {
      maps[i] = Tensor();  // recorded as a per-image failure below
    }
  });
  return evaluate_maps(ckpt, data, image_ids, name, maps, options);
}

WilcoxonResult wilcoxon_signed_rank(std::span<const double> differences) {
  std::vector<double> d;
  for (double v : differences) {
    if (std::isnan(v)) throw std::invalid_argument("differences contain NaN");
    if (v != 0.0) d.push_back(v);
  }
  if (d.empty()) throw DegenerateComparisonError("all paired differences are zero");
  const std::size_t n = d.size();
  if (n < 5) throw InsufficientDataError("signed-rank test needs 5 non-zero differences, got " + std::to_string(n));

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return std::fabs(d[a]) < std::fabs(d[b]); });
  // Doubled midranks stay integral under ties.
  std::vector<std::size_t> rank2(n);
  double tie_term = 0.0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && std::fabs(d[idx[j + 1]]) == std::fabs(d[idx[i]])) ++j;
    const std::size_t r2 = (i + 1) + (j + 1);
    for (std::size_t k = i; k <= j; ++k) rank2[idx[k]] = r2;
    const double t = static_cast<double>(j - i + 1);
    tie_term += t * t * t - t;
    i = j + 1;
  }
  std::size_t plus2 = 0, total2 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total2 += rank2[i];
    if (d[i] > 0) plus2 += rank2[i];
  }
  const std::size_t w2 = std::min(plus2, total2 - plus2);

  WilcoxonResult out;
  out.n = n;
  out.w = static_cast<double>(w2) / 2.0;
  if (n <= 20) {
    std::vector<double> count(total2 + 1, 0.0);
    count[0] = 1.0;
    for (std::size_t r : rank2) {
      for (std::size_t s = total2; s + 1 > r; --s) count[s] += count[s - r];
    }
    double tail = 0.0;
    for (std::size_t s = 0; s <= w2; ++s) tail += count[s];
    out.p = std::min(1.0, 2.0 * tail / std::ldexp(1.0, static_cast<int>(n)));
    out.exact = true;
    return out;
  }
  const double nn = static_cast<double>(n);
  const double mean = nn * (nn + 1.0) / 4.0;
  const double var = nn * (nn + 1.0) * (2.0 * nn + 1.0) / 24.0 - tie_term / 48.0;
  const double z = (out.w - mean) / std::sqrt(var);
  out.p = std::min(1.0, std::erfc(std::fabs(z) / std::sqrt(2.0)));
  return out;
}

std::string to_string(Metric metric) {
  switch (metric) {
    case Metric::e_minus: return "e_minus";
    case Metric::e_plus: return "e_plus";
    case Metric::e_delta: return "e_delta";
    case Metric::de_minus: return "de_minus";
    case Metric::de_plus: return "de_plus";
    case Metric::de_delta: return "de_delta";
  }
  return "unknown";
}

Metric metric_from_string(const std::string& name) {
  for (Metric m : {Metric::e_minus, Metric::e_plus, Metric::e_delta, Metric::de_minus, Metric::de_plus, Metric::de_delta}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown metric '" + name + "'");
}

double metric_value(const EvalRecord& r, Metric metric) {
  switch (metric) {
    case Metric::e_minus: return r.e_minus;
    case Metric::e_plus: return r.e_plus;
    case Metric::e_delta: return r.e_delta;
    case Metric::de_minus: return r.de_minus;
    case Metric::de_plus: return r.de_plus;
    case Metric::de_delta: return r.de_delta;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile of an empty sample");
  std::sort(values.begin(), values.end());
  const double h = (static_cast<double>(values.size()) - 1.0) * q;
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

std::vector<QuantileSummary> summarize(std::span<const EvalRecord> records, Metric metric) {
  std::map<std::string, std::vector<double>> groups;
  std::vector<std::string> order;
  for (const EvalRecord& r : records) {
    if (!r.ok()) continue;
    auto [it, inserted] = groups.try_emplace(r.method);
    if (inserted) order.push_back(r.method);
    it->second.push_back(metric_value(r, metric));
  }
  std::vector<QuantileSummary> out;
  for (const std::string& name : order) {
    const auto& v = groups[name];
    out.push_back({name, metric, v.size(), quantile(v, 0.10), quantile(v, 0.25), quantile(v, 0.50),
                   quantile(v, 0.75), quantile(v, 0.90)});
  }
  return out;
}

MethodComparison compare_methods(std::span<const EvalRecord> a, std::span<const EvalRecord> b, Metric metric) {
  MethodComparison c;
  c.metric = metric;
  if (!a.empty()) c.method_a = a.front().method;
  if (!b.empty()) c.method_b = b.front().method;
  std::map<std::size_t, const EvalRecord*> by_id;
  for (const EvalRecord& r : b) {
    if (r.ok()) by_id[r.image_id] = &r;
  }
  for (const EvalRecord& r : a) {
    auto it = by_id.find(r.image_id);
    if (!r.ok() || it == by_id.end()) continue;
    c.image_ids.push_back(r.image_id);
    c.differences.push_back(metric_value(r, metric) - metric_value(*it->second, metric));
  }
  c.n = static_cast<std::size_t>(std::count_if(c.differences.begin(), c.differences.end(), [](double v) { return v != 0.0; }));
  if (c.differences.empty()) {
    c.insufficient = true;
    return c;
  }
  c.median_diff = quantile(c.differences, 0.5);
  try {
    const WilcoxonResult w = wilcoxon_signed_rank(c.differences);
    c.w = w.w;
    c.p = w.p;
  } catch (const DegenerateComparisonError&) {
    c.degenerate = true;
  } catch (const InsufficientDataError&) {
    c.insufficient = true;
  }
  return c;
}

std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

void write_records_csv(std::ostream& out, std::span<const EvalRecord> records) {
  out << "image_id,method,e_minus,e_plus,e_delta,exi_minus,exi_plus,de_minus,de_plus,de_delta,"
         "flipped_minus,flipped_plus,steps_minus,steps_plus\n";
  for (const EvalRecord& r : records) {
    out << r.image_id << ',' << r.method << ',' << format_number(r.e_minus) << ',' << format_number(r.e_plus) << ','
        << format_number(r.e_delta) << ',' << format_number(r.exi_minus) << ',' << format_number(r.exi_plus) << ','
        << format_number(r.de_minus) << ',' << format_number(r.de_plus) << ',' << format_number(r.de_delta) << ','
        << (r.flipped_minus ? 1 : 0) << ',' << (r.flipped_plus ? 1 : 0) << ',' << r.steps_minus << ','
        << r.steps_plus << '\n';
  }
}

void write_comparisons_csv(std::ostream& out, std::span<const MethodComparison> comparisons) {
  out << "method_a,method_b,metric,n,W,p,median_diff\n";
  for (const MethodComparison& c : comparisons) {
    out << c.method_a << ',' << c.method_b << ',' << to_string(c.metric) << ',' << c.n << ',';
    if (c.degenerate) {
      out << "degenerate,degenerate,";
    } else if (c.insufficient) {
      out << "insufficient,insufficient,";
    } else {
      out << format_number(c.w) << ',' << format_number(c.p) << ',';
    }
    out << format_number(c.median_diff) << '\n';
  }
}

void write_summary_csv(std::ostream& out, std::span<const QuantileSummary> rows) {
  out << "method,metric,n,q10,q25,q50,q75,q90\n";
  for (const QuantileSummary& s : rows) {
    out << s.group << ',' << to_string(s.metric) << ',' << s.n << ',' << format_number(s.q10) << ','
        << format_number(s.q25) << ',' << format_number(s.q50) << ',' << format_number(s.q75) << ','
        << format_number(s.q90) << '\n';
  }
}

}  // namespace saliency

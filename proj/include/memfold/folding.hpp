#pragma once

// Folding: projects the samples of every retained instance of a repetitive
// region onto one synthetic iteration over normalized time [0,1], then
// reconstructs per-bin metric curves, the source-code profile and the phase
// partition from the folded population.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "memfold/trace.hpp"

namespace memfold {

struct RegionInstance {
  int index = 0;
  std::int64_t enter_ts = 0;
  std::int64_t exit_ts = 0;

  std::int64_t duration() const { return exit_ts - enter_ts; }
};

struct FoldedSample {
  double norm_time = 0.0;          // (ts - enter) / duration of its instance
  int source_instance = 0;
  std::int64_t timestamp = 0;      // original trace time, kept for resolution
  MemorySample payload;
  CounterSet counter_deltas;       // vs the previous sample of the instance
  std::int64_t delta_time = 0;     // ns covered by counter_deltas
};

struct MetricCurves {
  int bins = 0;
  std::vector<double> mips;        // instructions per microsecond
  std::vector<double> l1d_mpi;     // misses per instruction
  std::vector<double> l2_mpi;
  std::vector<double> l3_mpi;
  std::vector<double> branch_pi;   // branch instructions per instruction
  std::vector<double> ipc;
  std::vector<std::size_t> support;  // samples contributing deltas per bin

  bool empty_bin(int b) const { return support[static_cast<std::size_t>(b)] == 0; }
};

struct ScatterPoint {
  double norm_time = 0.0;
  std::string file;
  int line = 0;
};

struct SourceProfile {
  int bins = 0;
  std::vector<std::optional<Frame>> dominant;  // modal innermost frame per bin
  std::vector<ScatterPoint> scatter;           // every sampled (time, line)
};

struct Phase {
  double start_frac = 0.0;
  double end_frac = 0.0;
  std::string label;            // "A", "B", ... or "a1", "a2" when split
  std::string dominant_routine;
  std::string mocl_file;        // most observed code line
  int mocl_line = 0;

  double width() const { return end_frac - start_frac; }
};

struct FoldedRegion {
  int region_id = 0;
  std::size_t total_instances = 0;
  std::vector<RegionInstance> instances;  // retained
  std::vector<FoldedSample> samples;      // sorted by norm_time
  MetricCurves curves;
  SourceProfile profile;
  std::vector<Phase> phases;
  std::int64_t median_duration_ns = 0;    // over retained instances
};

inline std::vector<RegionInstance> detect_instances(const Trace& trace,
                                                    int region_id) {
  std::vector<RegionInstance> out;
  std::optional<std::int64_t> open;
  for (const TraceEvent& event : trace.events) {
    const auto* marker = std::get_if<RegionMarker>(&event.payload);
    if (!marker || marker->region_id != region_id) continue;
    if (marker->is_enter) {
      if (open)
        throw std::runtime_error("region " + std::to_string(region_id) +
                                 ": unmatched enter at t=" +
                                 std::to_string(*open));
      open = event.timestamp;
    } else {
      if (!open)
        throw std::runtime_error("region " + std::to_string(region_id) +
                                 ": exit without enter at t=" +
                                 std::to_string(event.timestamp));
      if (event.timestamp <= *open)
        throw std::runtime_error("region " + std::to_string(region_id) +
                                 ": zero-duration instance at t=" +
                                 std::to_string(*open));
      out.push_back({static_cast<int>(out.size()), *open, event.timestamp});
      open.reset();
    }
  }
  if (open)
    throw std::runtime_error("region " + std::to_string(region_id) +
                             ": unmatched enter at t=" + std::to_string(*open));
  return out;
}

// Keeps instances whose duration lies within [1-tol, 1+tol] x median.
// At least one instance (the one closest to the median) always survives.
inline std::vector<RegionInstance> filter_instances(
    const std::vector<RegionInstance>& instances, double tolerance = 0.2) {
  if (instances.empty()) return {};
  std::vector<std::int64_t> durations;
  durations.reserve(instances.size());
  for (const RegionInstance& inst : instances)
    durations.push_back(inst.duration());
  std::sort(durations.begin(), durations.end());
  const std::size_t n = durations.size();
  const double median =
      n % 2 ? double(durations[n / 2])
            : 0.5 * (double(durations[n / 2 - 1]) + double(durations[n / 2]));
  const double lo = (1.0 - tolerance) * median;
  const double hi = (1.0 + tolerance) * median;

  std::vector<RegionInstance> retained;
  for (const RegionInstance& inst : instances) {
    double d = double(inst.duration());
    if (d >= lo && d <= hi) retained.push_back(inst);
  }
  if (retained.empty()) {
    std::size_t best = 0;
    double best_gap = std::abs(double(instances[0].duration()) - median);
    for (std::size_t i = 1; i < instances.size(); ++i) {
      double gap = std::abs(double(instances[i].duration()) - median);
      if (gap < best_gap) {
        best_gap = gap;
        best = i;
      }
    }
    retained.push_back(instances[best]);
  }
  return retained;
}

inline std::int64_t median_duration(const std::vector<RegionInstance>& insts) {
  if (insts.empty()) return 0;
  std::vector<std::int64_t> durations;
  durations.reserve(insts.size());
  for (const RegionInstance& inst : insts) durations.push_back(inst.duration());
  std::sort(durations.begin(), durations.end());
  const std::size_t n = durations.size();
  if (n % 2) return durations[n / 2];
  return (durations[n / 2 - 1] + durations[n / 2]) / 2;
}

// Projects every sample inside a retained instance onto [0,1]. Counter
// deltas are taken against the previous sample of the same instance; the
// first sample of an instance carries zero deltas (exact when the trace has
// a counter-snapshot pseudo-sample at the enter, which generated traces do).
inline std::vector<FoldedSample> fold_samples(
    const std::vector<RegionInstance>& retained,
    const std::vector<TraceEvent>& events) {
  std::vector<FoldedSample> out;
  if (retained.empty()) return out;

  std::size_t i = 0;  // current instance
  int prev_instance = -1;
  CounterSet prev_counters;
  std::int64_t prev_ts = 0;

  for (const TraceEvent& event : events) {
    const auto* sample = std::get_if<MemorySample>(&event.payload);
    if (!sample) continue;
    const std::int64_t ts = event.timestamp;
    while (i < retained.size() && retained[i].exit_ts < ts) ++i;
    if (i >= retained.size()) break;
    const RegionInstance& inst = retained[i];
    if (ts < inst.enter_ts) continue;  // between instances

    FoldedSample folded;
    folded.norm_time = double(ts - inst.enter_ts) / double(inst.duration());
    folded.source_instance = inst.index;
    folded.timestamp = ts;
    folded.payload = *sample;
    if (prev_instance == inst.index) {
      auto prev = prev_counters.as_array();
      auto cur = sample->counters.as_array();
      std::array<std::uint64_t, 6> delta{};
      for (std::size_t k = 0; k < delta.size(); ++k)
        delta[k] = cur[k] >= prev[k] ? cur[k] - prev[k] : 0;
      folded.counter_deltas = {delta[0], delta[1], delta[2],
                               delta[3], delta[4], delta[5]};
      folded.delta_time = ts - prev_ts;
    }
    prev_instance = inst.index;
    prev_counters = sample->counters;
    prev_ts = ts;
    out.push_back(std::move(folded));
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const FoldedSample& a, const FoldedSample& b) {
                     return a.norm_time < b.norm_time;
                   });
  return out;
}

inline int bin_of(double norm_time, int bins) {
  int b = static_cast<int>(norm_time * bins);
  return std::clamp(b, 0, bins - 1);
}

namespace detail {

// Centered moving average over the supported bins within +/-2 positions;
// empty bins are excluded from the window and stay zero.
inline std::vector<double> smooth_curve(const std::vector<double>& raw,
                                        const std::vector<std::size_t>& support) {
  const int n = static_cast<int>(raw.size());
  std::vector<double> out(raw.size(), 0.0);
  for (int i = 0; i < n; ++i) {
    if (support[static_cast<std::size_t>(i)] == 0) continue;
    double sum = 0.0;
    int count = 0;
    for (int j = std::max(0, i - 2); j <= std::min(n - 1, i + 2); ++j) {
      if (support[static_cast<std::size_t>(j)] == 0) continue;
      sum += raw[static_cast<std::size_t>(j)];
      ++count;
    }
    out[static_cast<std::size_t>(i)] = sum / count;
  }
  return out;
}

}  // namespace detail

inline MetricCurves fold_counters(std::span<const FoldedSample> folded,
                                  int bins) {
  if (bins < 10)
    throw std::invalid_argument("fold_counters: need at least 10 bins");
  MetricCurves curves;
  curves.bins = bins;
  const std::size_t n = static_cast<std::size_t>(bins);
  std::vector<double> instr(n, 0), cycles(n, 0), l1d(n, 0), l2(n, 0), l3(n, 0),
      branch(n, 0), dt(n, 0);
  curves.support.assign(n, 0);

  for (const FoldedSample& s : folded) {
    if (s.delta_time <= 0) continue;
    auto b = static_cast<std::size_t>(bin_of(s.norm_time, bins));
    instr[b] += double(s.counter_deltas.instructions);
    cycles[b] += double(s.counter_deltas.cycles);
    l1d[b] += double(s.counter_deltas.l1d_misses);
    l2[b] += double(s.counter_deltas.l2_misses);
    l3[b] += double(s.counter_deltas.l3_misses);
    branch[b] += double(s.counter_deltas.branch_instructions);
    dt[b] += double(s.delta_time);
    ++curves.support[b];
  }

  std::vector<double> mips(n, 0), l1d_mpi(n, 0), l2_mpi(n, 0), l3_mpi(n, 0),
      branch_pi(n, 0), ipc(n, 0);
  for (std::size_t b = 0; b < n; ++b) {
    if (dt[b] > 0) mips[b] = 1000.0 * instr[b] / dt[b];  // ns -> us
    if (instr[b] > 0) {
      l1d_mpi[b] = l1d[b] / instr[b];
      l2_mpi[b] = l2[b] / instr[b];
      l3_mpi[b] = l3[b] / instr[b];
      branch_pi[b] = branch[b] / instr[b];
    }
    if (cycles[b] > 0) ipc[b] = instr[b] / cycles[b];
  }
  curves.mips = detail::smooth_curve(mips, curves.support);
  curves.l1d_mpi = detail::smooth_curve(l1d_mpi, curves.support);
  curves.l2_mpi = detail::smooth_curve(l2_mpi, curves.support);
  curves.l3_mpi = detail::smooth_curve(l3_mpi, curves.support);
  curves.branch_pi = detail::smooth_curve(branch_pi, curves.support);
  curves.ipc = detail::smooth_curve(ipc, curves.support);
  return curves;
}

// Per-bin modal innermost frame plus the full (time, line) scatter.
// Ties break to the lexicographically smaller (file, line, routine).
inline SourceProfile fold_source_profile(std::span<const FoldedSample> folded,
                                         int bins) {
  SourceProfile profile;
  profile.bins = bins;
  profile.dominant.assign(static_cast<std::size_t>(bins), std::nullopt);

  std::vector<std::map<Frame, std::size_t>> counts(
      static_cast<std::size_t>(bins));
  for (const FoldedSample& s : folded) {
    if (s.payload.is_pseudo() || s.payload.callstack.empty()) continue;
    const Frame& frame = s.payload.callstack.front();
    auto b = static_cast<std::size_t>(bin_of(s.norm_time, bins));
    ++counts[b][frame];
    profile.scatter.push_back({s.norm_time, frame.file, frame.line});
  }
  for (std::size_t b = 0; b < counts.size(); ++b) {
    const Frame* best = nullptr;
    std::size_t best_count = 0;
    for (const auto& [frame, count] : counts[b]) {
      bool wins = count > best_count;
      if (count == best_count && best) {
        auto key = std::tie(frame.file, frame.line, frame.routine);
        auto best_key = std::tie(best->file, best->line, best->routine);
        wins = key < best_key;
      }
      if (wins) {
        best = &frame;
        best_count = count;
      }
    }
    if (best) profile.dominant[b] = *best;
  }
  return profile;
}

namespace detail {

struct BinRun {
  int begin = 0;    // bin index, inclusive
  int end = 0;      // bin index, exclusive
  int key_bin = 0;  // bin whose key identifies the run (survives merging)
  int width() const { return end - begin; }
};

// Collapses runs narrower than min_bins into their predecessor; the first
// run merges forward instead. The absorbing run keeps its key bin.
inline std::vector<BinRun> merge_narrow_runs(std::vector<BinRun> runs,
                                             int min_bins) {
  bool changed = true;
  while (changed && runs.size() > 1) {
    changed = false;
    for (std::size_t i = 0; i < runs.size(); ++i) {
      if (runs[i].width() >= min_bins) continue;
      if (i == 0) {
        runs[1].begin = runs[0].begin;
        runs.erase(runs.begin());
      } else {
        runs[i - 1].end = runs[i].end;
        runs.erase(runs.begin() + static_cast<std::ptrdiff_t>(i));
      }
      changed = true;
      break;
    }
  }
  return runs;
}

template <typename KeyOf>
std::vector<BinRun> runs_of(int begin, int end, KeyOf key_of) {
  std::vector<BinRun> runs;
  for (int b = begin; b < end; ++b) {
    if (!runs.empty() && key_of(runs.back().key_bin) == key_of(b)) {
      runs.back().end = b + 1;
    } else {
      runs.push_back({b, b + 1, b});
    }
  }
  return runs;
}

inline std::string phase_letter(std::size_t ordinal, bool lowercase) {
  std::string label;
  std::size_t n = ordinal;
  do {
    label.insert(label.begin(),
                 static_cast<char>((lowercase ? 'a' : 'A') + n % 26));
    n = n / 26;
  } while (n-- > 0);
  return label;
}

}  // namespace detail

// Maximal runs of bins sharing a dominant routine become phases; runs
// narrower than min_width merge into their neighbor. A phase whose dominant
// line shifts between stable sub-runs of the same routine splits into
// sublabeled sub-phases (a1, a2, ...). MOCL is the modal sampled line
// within each phase window.
inline std::vector<Phase> detect_phases(const SourceProfile& profile,
                                        double min_width = 0.03) {
  const int B = profile.bins;
  std::vector<Phase> phases;

  // Fill empty bins forward so phase runs span sampling gaps.
  std::vector<const Frame*> filled(static_cast<std::size_t>(B), nullptr);
  const Frame* current = nullptr;
  for (int b = 0; b < B && !current; ++b)
    if (profile.dominant[static_cast<std::size_t>(b)])
      current = &*profile.dominant[static_cast<std::size_t>(b)];
  if (!current) return phases;  // no samples at all
  for (int b = 0; b < B; ++b) {
    if (profile.dominant[static_cast<std::size_t>(b)])
      current = &*profile.dominant[static_cast<std::size_t>(b)];
    filled[static_cast<std::size_t>(b)] = current;
  }

  const int min_bins = static_cast<int>(std::ceil(min_width * B - 1e-9));

  auto routine_of = [&](int b) -> const std::string& {
    return filled[static_cast<std::size_t>(b)]->routine;
  };
  auto line_of = [&](int b) {
    const Frame* f = filled[static_cast<std::size_t>(b)];
    return std::pair<const std::string&, int>(f->file, f->line);
  };

  auto routine_runs = detail::runs_of<std::string>(
      0, B, [&](int b) -> const std::string& { return routine_of(b); });
  routine_runs =
      detail::merge_narrow_runs<std::string>(std::move(routine_runs), min_bins);

  // Modal (file, line) among scatter points inside a bin window.
  auto mocl_in = [&](int begin, int end) -> std::pair<std::string, int> {
    std::map<std::pair<std::string, int>, std::size_t> counts;
    for (const ScatterPoint& pt : profile.scatter) {
      int b = bin_of(pt.norm_time, B);
      if (b >= begin && b < end) ++counts[{pt.file, pt.line}];
    }
    std::pair<std::string, int> best{};
    std::size_t best_count = 0;
    for (const auto& [key, count] : counts) {
      if (count > best_count) {  // map order breaks ties to the smaller key
        best = key;
        best_count = count;
      }
    }
    if (best_count == 0) {
      auto [file, line] = line_of(begin);
      return {file, line};
    }
    return best;
  };

  auto frac_of = [&](int bin) {
    return bin >= B ? 1.0 : double(bin) / double(B);
  };

  for (std::size_t p = 0; p < routine_runs.size(); ++p) {
    const detail::BinRun& run = routine_runs[p];
    auto line_runs = detail::runs_of<std::pair<std::string, int>>(
        run.begin, run.end, [&](int b) { return line_of(b); });
    line_runs =
        detail::merge_narrow_runs<std::pair<std::string, int>>(
            std::move(line_runs), min_bins);

    if (line_runs.size() >= 2) {
      for (std::size_t s = 0; s < line_runs.size(); ++s) {
        Phase phase;
        phase.start_frac = frac_of(line_runs[s].begin);
        phase.end_frac = frac_of(line_runs[s].end);
        phase.label =
            detail::phase_letter(p, true) + std::to_string(s + 1);
        phase.dominant_routine = routine_of(run.begin);
        auto [file, line] = mocl_in(line_runs[s].begin, line_runs[s].end);
        phase.mocl_file = file;
        phase.mocl_line = line;
        phases.push_back(std::move(phase));
      }
    } else {
      Phase phase;
      phase.start_frac = frac_of(run.begin);
      phase.end_frac = frac_of(run.end);
      phase.label = detail::phase_letter(p, false);
      phase.dominant_routine = routine_of(run.begin);
      auto [file, line] = mocl_in(run.begin, run.end);
      phase.mocl_file = file;
      phase.mocl_line = line;
      phases.push_back(std::move(phase));
    }
  }
  return phases;
}

struct FoldConfig {
  int bins = 100;
  double tolerance = 0.2;
  double min_phase_width = 0.03;
};

// Full folding pipeline for one region. Throws when the region has no
// instances (missing markers).
inline FoldedRegion fold_region(const Trace& trace, int region_id,
                                const FoldConfig& config = {}) {
  FoldedRegion region;
  region.region_id = region_id;
  auto instances = detect_instances(trace, region_id);
  if (instances.empty())
    throw std::runtime_error("region " + std::to_string(region_id) +
                             ": no region markers in trace");
  region.total_instances = instances.size();
  region.instances = filter_instances(instances, config.tolerance);
  region.median_duration_ns = median_duration(region.instances);
  region.samples = fold_samples(region.instances, trace.events);
  region.curves = fold_counters(region.samples, config.bins);
  region.profile = fold_source_profile(region.samples, config.bins);
  region.phases = detect_phases(region.profile, config.min_phase_width);
  return region;
}

// Index into region.phases for a folded sample, through its bin. Returns -1
// when no phase covers the bin (empty profile).
inline int phase_of(const FoldedRegion& region, double norm_time) {
  if (region.phases.empty()) return -1;
  const int b = bin_of(norm_time, region.profile.bins);
  const double frac = (double(b) + 0.5) / double(region.profile.bins);
  for (std::size_t i = 0; i < region.phases.size(); ++i) {
    if (frac >= region.phases[i].start_frac && frac < region.phases[i].end_frac)
      return static_cast<int>(i);
  }
  return static_cast<int>(region.phases.size()) - 1;
}

}  // namespace memfold

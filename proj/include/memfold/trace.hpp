#pragma once

// Event-trace data model and its MTF v1 text serialization.
//
// MTF (Memory Trace Format) is line-oriented UTF-8 text, fields '|'-separated:
//   H|<version>|<process_id>|<freq_mhz>            header, first line, once
//   O|<name>|<base_hex>|<size>                     static object (timestamp 0)
//   A|<ts>|<base_hex>|<size>|<callsite>            allocation
//   F|<ts>|<base_hex>                              free
//   W|<ts>|<begin_hex>|<end_hex>|<label>           wrapped region
//   R|<ts>|<region_id>|E  /  R|<ts>|<region_id>|X  region enter / exit
//   M|<ts>|L  /  M|<ts>|S                          multiplex window start
//   S|<ts>|L|<addr_hex>|<lat>|<level>|<c;..;c>|<frame>[,<frame>...]
//   S|<ts>|S|<addr_hex>|<0|1>|<c;..;c>|<frame>[,<frame>...]
// Counter order is instructions;cycles;l1d;l2;l3;branch. A frame is
// routine:file:line, innermost first. Lines starting with '#' are comments.
// Addresses serialize as lowercase hex with an 0x prefix.

#include <array>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace memfold {

enum class AccessKind : std::uint8_t { Load, Store };

enum class MemLevel : std::uint8_t { L1, LFB, L2, L3, DRAM };

inline constexpr int kMemLevelCount = 5;

inline const char* level_name(MemLevel level) {
  switch (level) {
    case MemLevel::L1: return "L1";
    case MemLevel::LFB: return "LFB";
    case MemLevel::L2: return "L2";
    case MemLevel::L3: return "L3";
    case MemLevel::DRAM: return "DRAM";
  }
  return "?";
}

inline std::optional<MemLevel> level_from_name(std::string_view name) {
  for (int i = 0; i < kMemLevelCount; ++i) {
    auto lvl = static_cast<MemLevel>(i);
    if (name == level_name(lvl)) return lvl;
  }
  return std::nullopt;
}

// Cumulative hardware-counter readings since process start.
struct CounterSet {
  std::uint64_t instructions = 0;
  std::uint64_t cycles = 0;
  std::uint64_t l1d_misses = 0;
  std::uint64_t l2_misses = 0;
  std::uint64_t l3_misses = 0;
  std::uint64_t branch_instructions = 0;

  friend bool operator==(const CounterSet&, const CounterSet&) = default;

  std::array<std::uint64_t, 6> as_array() const {
    return {instructions, cycles, l1d_misses, l2_misses, l3_misses,
            branch_instructions};
  }
};

// One call-stack frame; callstacks are ordered innermost first.
struct Frame {
  std::string routine;
  std::string file;
  int line = 0;

  friend bool operator==(const Frame&, const Frame&) = default;
  friend auto operator<=>(const Frame&, const Frame&) = default;
};

struct TraceHeader {
  int version = 1;
  int process_id = 0;
  int nominal_freq_mhz = 0;  // core cycles per microsecond

  friend bool operator==(const TraceHeader&, const TraceHeader&) = default;
};

struct RegionMarker {
  int region_id = 0;
  bool is_enter = false;

  friend bool operator==(const RegionMarker&, const RegionMarker&) = default;
};

struct AllocEvent {
  std::uint64_t base = 0;
  std::uint64_t size = 0;
  std::string callsite;  // file:line of the allocation call-stack top

  friend bool operator==(const AllocEvent&, const AllocEvent&) = default;
};

struct FreeEvent {
  std::uint64_t base = 0;

  friend bool operator==(const FreeEvent&, const FreeEvent&) = default;
};

struct WrappedRegionEvent {
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::string label;

  friend bool operator==(const WrappedRegionEvent&,
                         const WrappedRegionEvent&) = default;
};

struct StaticObjectDecl {
  std::string name;
  std::uint64_t base = 0;
  std::uint64_t size = 0;

  friend bool operator==(const StaticObjectDecl&,
                         const StaticObjectDecl&) = default;
};

// Marks which sample kind is collected from this timestamp until the next
// window event.
struct MultiplexWindow {
  AccessKind kind = AccessKind::Load;

  friend bool operator==(const MultiplexWindow&,
                         const MultiplexWindow&) = default;
};

struct MemorySample {
  AccessKind kind = AccessKind::Load;
  std::uint64_t address = 0;
  std::uint32_t latency_cycles = 0;    // loads only
  MemLevel level = MemLevel::L1;       // loads only
  bool store_l1_hit = false;           // stores only
  CounterSet counters;                 // cumulative since process start
  std::vector<Frame> callstack;        // innermost first

  // Address 0x0 marks a counter-snapshot pseudo-sample at a region enter;
  // those are excluded from all access statistics.
  bool is_pseudo() const { return address == 0; }

  friend bool operator==(const MemorySample&, const MemorySample&) = default;

  static MemorySample load(std::uint64_t address, std::uint32_t latency,
                           MemLevel level, CounterSet counters,
                           std::vector<Frame> callstack) {
    MemorySample s;
    s.kind = AccessKind::Load;
    s.address = address;
    s.latency_cycles = latency;
    s.level = level;
    s.counters = counters;
    s.callstack = std::move(callstack);
    return s;
  }

  static MemorySample store(std::uint64_t address, bool l1_hit,
                            CounterSet counters, std::vector<Frame> callstack) {
    MemorySample s;
    s.kind = AccessKind::Store;
    s.address = address;
    s.store_l1_hit = l1_hit;
    s.counters = counters;
    s.callstack = std::move(callstack);
    return s;
  }
};

using EventPayload =
    std::variant<RegionMarker, AllocEvent, FreeEvent, WrappedRegionEvent,
                 StaticObjectDecl, MultiplexWindow, MemorySample>;

struct TraceEvent {
  std::int64_t timestamp = 0;  // ns since trace start
  EventPayload payload;

  friend bool operator==(const TraceEvent&, const TraceEvent&) = default;
};

struct Trace {
  TraceHeader header;
  std::vector<TraceEvent> events;  // sorted non-decreasing by timestamp

  friend bool operator==(const Trace&, const Trace&) = default;
};

// Parse failure; message carries the line number and offending field.
struct ParseError : std::runtime_error {
  int line = 0;
  std::string field;

  ParseError(int line_no, std::string field_name, const std::string& what)
      : std::runtime_error("line " + std::to_string(line_no) + ", field '" +
                           field_name + "': " + what),
        line(line_no),
        field(std::move(field_name)) {}
};

enum class Severity { Warning, Error };

// Index value used for diagnostics about the header rather than an event.
inline constexpr std::size_t kHeaderDiagIndex = static_cast<std::size_t>(-1);

struct Diagnostic {
  Severity severity = Severity::Error;
  std::size_t event_index = 0;
  std::string message;
};

namespace detail {

inline std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (true) {
    std::size_t next = text.find(sep, pos);
    if (next == std::string_view::npos) {
      out.push_back(text.substr(pos));
      return out;
    }
    out.push_back(text.substr(pos, next - pos));
    pos = next + 1;
  }
}

inline std::uint64_t parse_u64(std::string_view text, int line,
                               const char* field) {
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(),
                                   value, 10);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ParseError(line, field, "expected unsigned integer, got '" +
                                      std::string(text) + "'");
  return value;
}

inline std::int64_t parse_ts(std::string_view text, int line) {
  std::uint64_t v = parse_u64(text, line, "ts");
  if (v > static_cast<std::uint64_t>(INT64_MAX))
    throw ParseError(line, "ts", "timestamp out of range");
  return static_cast<std::int64_t>(v);
}

inline std::uint64_t parse_hex(std::string_view text, int line,
                               const char* field) {
  if (text.size() < 3 || text[0] != '0' || (text[1] != 'x' && text[1] != 'X'))
    throw ParseError(line, field, "expected 0x-prefixed hex address, got '" +
                                      std::string(text) + "'");
  std::uint64_t value = 0;
  std::string_view digits = text.substr(2);
  auto [ptr, ec] = std::from_chars(digits.data(),
                                   digits.data() + digits.size(), value, 16);
  if (ec != std::errc() || ptr != digits.data() + digits.size())
    throw ParseError(line, field, "bad hex address '" + std::string(text) + "'");
  return value;
}

inline int parse_int(std::string_view text, int line, const char* field) {
  int value = 0;
  auto [ptr, ec] =
      std::from_chars(text.data(), text.data() + text.size(), value, 10);
  if (ec != std::errc() || ptr != text.data() + text.size() || text.empty())
    throw ParseError(line, field,
                     "expected integer, got '" + std::string(text) + "'");
  return value;
}

inline CounterSet parse_counters(std::string_view text, int line) {
  auto parts = split(text, ';');
  if (parts.size() != 6)
    throw ParseError(line, "counters", "expected 6 ';'-separated counters");
  CounterSet c;
  c.instructions = parse_u64(parts[0], line, "counters");
  c.cycles = parse_u64(parts[1], line, "counters");
  c.l1d_misses = parse_u64(parts[2], line, "counters");
  c.l2_misses = parse_u64(parts[3], line, "counters");
  c.l3_misses = parse_u64(parts[4], line, "counters");
  c.branch_instructions = parse_u64(parts[5], line, "counters");
  return c;
}

inline std::vector<Frame> parse_callstack(std::string_view text, int line) {
  if (text.empty())
    throw ParseError(line, "callstack", "callstack must not be empty");
  std::vector<Frame> frames;
  for (std::string_view part : split(text, ',')) {
    auto bits = split(part, ':');
    if (bits.size() != 3)
      throw ParseError(line, "callstack",
                       "frame must be routine:file:line, got '" +
                           std::string(part) + "'");
    Frame f;
    f.routine = std::string(bits[0]);
    f.file = std::string(bits[1]);
    f.line = parse_int(bits[2], line, "callstack");
    frames.push_back(std::move(f));
  }
  return frames;
}

inline std::string hex_addr(std::uint64_t addr) {
  char buf[24];
  std::snprintf(buf, sizeof buf, "0x%llx",
                static_cast<unsigned long long>(addr));
  return buf;
}

inline void require_fields(const std::vector<std::string_view>& fields,
                           std::size_t n, int line, const char* tag) {
  if (fields.size() != n)
    throw ParseError(line, tag,
                     "expected " + std::to_string(n) + " fields, got " +
                         std::to_string(fields.size()));
}

}  // namespace detail

inline Trace parse_trace(std::istream& in) {
  using namespace detail;
  Trace trace;
  bool have_header = false;
  std::int64_t prev_ts = 0;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    auto fields = split(line, '|');
    std::string_view tag = fields[0];

    if (tag == "H") {
      if (have_header) throw ParseError(line_no, "H", "duplicate header");
      require_fields(fields, 4, line_no, "H");
      trace.header.version = parse_int(fields[1], line_no, "version");
      if (trace.header.version != 1)
        throw ParseError(line_no, "version",
                         "version mismatch: expected 1, got " +
                             std::string(fields[1]));
      trace.header.process_id = parse_int(fields[2], line_no, "process_id");
      trace.header.nominal_freq_mhz = parse_int(fields[3], line_no, "freq_mhz");
      if (trace.header.nominal_freq_mhz <= 0)
        throw ParseError(line_no, "freq_mhz", "frequency must be positive");
      have_header = true;
      continue;
    }
    if (!have_header)
      throw ParseError(line_no, std::string(tag),
                       "header record must come first");

    TraceEvent event;
    if (tag == "O") {
      require_fields(fields, 4, line_no, "O");
      StaticObjectDecl decl;
      decl.name = std::string(fields[1]);
      decl.base = parse_hex(fields[2], line_no, "base");
      decl.size = parse_u64(fields[3], line_no, "size");
      if (decl.size == 0)
        throw ParseError(line_no, "size", "static object size must be > 0");
      event.timestamp = 0;
      event.payload = std::move(decl);
    } else if (tag == "A") {
      require_fields(fields, 5, line_no, "A");
      AllocEvent alloc;
      event.timestamp = parse_ts(fields[1], line_no);
      alloc.base = parse_hex(fields[2], line_no, "base");
      alloc.size = parse_u64(fields[3], line_no, "size");
      if (alloc.size == 0)
        throw ParseError(line_no, "size", "allocation size must be > 0");
      alloc.callsite = std::string(fields[4]);
      event.payload = std::move(alloc);
    } else if (tag == "F") {
      require_fields(fields, 3, line_no, "F");
      event.timestamp = parse_ts(fields[1], line_no);
      event.payload = FreeEvent{parse_hex(fields[2], line_no, "base")};
    } else if (tag == "W") {
      require_fields(fields, 5, line_no, "W");
      WrappedRegionEvent wrap;
      event.timestamp = parse_ts(fields[1], line_no);
      wrap.begin = parse_hex(fields[2], line_no, "begin");
      wrap.end = parse_hex(fields[3], line_no, "end");
      if (wrap.begin >= wrap.end)
        throw ParseError(line_no, "end",
                         "wrapped region begin must be below end");
      wrap.label = std::string(fields[4]);
      event.payload = std::move(wrap);
    } else if (tag == "R") {
      require_fields(fields, 4, line_no, "R");
      RegionMarker marker;
      event.timestamp = parse_ts(fields[1], line_no);
      marker.region_id = parse_int(fields[2], line_no, "region_id");
      if (fields[3] == "E")
        marker.is_enter = true;
      else if (fields[3] == "X")
        marker.is_enter = false;
      else
        throw ParseError(line_no, "edge", "expected E or X, got '" +
                                              std::string(fields[3]) + "'");
      event.payload = marker;
    } else if (tag == "M") {
      require_fields(fields, 3, line_no, "M");
      event.timestamp = parse_ts(fields[1], line_no);
      if (fields[2] == "L")
        event.payload = MultiplexWindow{AccessKind::Load};
      else if (fields[2] == "S")
        event.payload = MultiplexWindow{AccessKind::Store};
      else
        throw ParseError(line_no, "kind", "expected L or S, got '" +
                                              std::string(fields[2]) + "'");
    } else if (tag == "S") {
      if (fields.size() < 3)
        throw ParseError(line_no, "S", "truncated sample record");
      event.timestamp = parse_ts(fields[1], line_no);
      MemorySample sample;
      if (fields[2] == "L") {
        require_fields(fields, 8, line_no, "S");
        sample.kind = AccessKind::Load;
        sample.address = parse_hex(fields[3], line_no, "address");
        std::uint64_t lat = parse_u64(fields[4], line_no, "latency");
        if (lat > UINT32_MAX)
          throw ParseError(line_no, "latency", "latency out of range");
        sample.latency_cycles = static_cast<std::uint32_t>(lat);
        auto level = level_from_name(fields[5]);
        if (!level)
          throw ParseError(line_no, "level",
                           "unknown hierarchy level '" +
                               std::string(fields[5]) + "'");
        sample.level = *level;
        sample.counters = parse_counters(fields[6], line_no);
        sample.callstack = parse_callstack(fields[7], line_no);
      } else if (fields[2] == "S") {
        require_fields(fields, 7, line_no, "S");
        sample.kind = AccessKind::Store;
        sample.address = parse_hex(fields[3], line_no, "address");
        if (fields[4] == "1")
          sample.store_l1_hit = true;
        else if (fields[4] == "0")
          sample.store_l1_hit = false;
        else
          throw ParseError(line_no, "hit", "expected 0 or 1, got '" +
                                               std::string(fields[4]) + "'");
        sample.counters = parse_counters(fields[5], line_no);
        sample.callstack = parse_callstack(fields[6], line_no);
      } else {
        throw ParseError(line_no, "kind", "expected L or S, got '" +
                                              std::string(fields[2]) + "'");
      }
      event.payload = std::move(sample);
    } else {
      throw ParseError(line_no, std::string(tag),
                       "unknown record tag '" + std::string(tag) + "'");
    }

    if (event.timestamp < prev_ts)
      throw ParseError(line_no, "ts", "timestamps out of order (" +
                                          std::to_string(event.timestamp) +
                                          " after " + std::to_string(prev_ts) +
                                          ")");
    prev_ts = event.timestamp;
    trace.events.push_back(std::move(event));
  }
  if (!have_header)
    throw ParseError(line_no, "H", "missing header record");
  return trace;
}

inline Trace parse_trace_string(std::string_view text) {
  std::istringstream in{std::string(text)};
  return parse_trace(in);
}

inline void emit_trace(const Trace& trace, std::ostream& out) {
  using detail::hex_addr;
  out << "H|" << trace.header.version << '|' << trace.header.process_id << '|'
      << trace.header.nominal_freq_mhz << '\n';
  for (const TraceEvent& event : trace.events) {
    const std::int64_t ts = event.timestamp;
    std::visit(
        [&](const auto& payload) {
          using T = std::decay_t<decltype(payload)>;
          if constexpr (std::is_same_v<T, StaticObjectDecl>) {
            out << "O|" << payload.name << '|' << hex_addr(payload.base) << '|'
                << payload.size << '\n';
          } else if constexpr (std::is_same_v<T, AllocEvent>) {
            out << "A|" << ts << '|' << hex_addr(payload.base) << '|'
                << payload.size << '|' << payload.callsite << '\n';
          } else if constexpr (std::is_same_v<T, FreeEvent>) {
            out << "F|" << ts << '|' << hex_addr(payload.base) << '\n';
          } else if constexpr (std::is_same_v<T, WrappedRegionEvent>) {
            out << "W|" << ts << '|' << hex_addr(payload.begin) << '|'
                << hex_addr(payload.end) << '|' << payload.label << '\n';
          } else if constexpr (std::is_same_v<T, RegionMarker>) {
            out << "R|" << ts << '|' << payload.region_id << '|'
                << (payload.is_enter ? 'E' : 'X') << '\n';
          } else if constexpr (std::is_same_v<T, MultiplexWindow>) {
            out << "M|" << ts << '|'
                << (payload.kind == AccessKind::Load ? 'L' : 'S') << '\n';
          } else if constexpr (std::is_same_v<T, MemorySample>) {
            out << "S|" << ts << '|';
            if (payload.kind == AccessKind::Load) {
              out << "L|" << hex_addr(payload.address) << '|'
                  << payload.latency_cycles << '|' << level_name(payload.level);
            } else {
              out << "S|" << hex_addr(payload.address) << '|'
                  << (payload.store_l1_hit ? '1' : '0');
            }
            const CounterSet& c = payload.counters;
            out << '|' << c.instructions << ';' << c.cycles << ';'
                << c.l1d_misses << ';' << c.l2_misses << ';' << c.l3_misses
                << ';' << c.branch_instructions << '|';
            for (std::size_t i = 0; i < payload.callstack.size(); ++i) {
              const Frame& f = payload.callstack[i];
              if (i) out << ',';
              out << f.routine << ':' << f.file << ':' << f.line;
            }
            out << '\n';
          }
        },
        event.payload);
  }
}

inline std::string emit_trace(const Trace& trace) {
  std::ostringstream out;
  emit_trace(trace, out);
  return out.str();
}

// Checks every model invariant and returns diagnostics; an empty list means
// the trace is fully valid. Free-without-alloc is a warning, everything else
// an error.
inline std::vector<Diagnostic> validate_trace(const Trace& trace) {
  std::vector<Diagnostic> diags;
  auto error = [&](std::size_t index, std::string message) {
    diags.push_back({Severity::Error, index, std::move(message)});
  };
  auto warning = [&](std::size_t index, std::string message) {
    diags.push_back({Severity::Warning, index, std::move(message)});
  };

  if (trace.header.version != 1)
    error(kHeaderDiagIndex, "version mismatch: expected 1, got " +
                                std::to_string(trace.header.version));
  if (trace.header.nominal_freq_mhz <= 0)
    error(kHeaderDiagIndex, "nominal frequency must be positive");

  std::int64_t prev_ts = 0;
  std::map<int, bool> region_open;              // region_id -> inside?
  std::map<std::uint64_t, std::size_t> live;    // alloc base -> event index
  std::optional<AccessKind> last_window;
  const CounterSet* prev_counters = nullptr;

  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    const TraceEvent& event = trace.events[i];
    if (event.timestamp < 0)
      error(i, "negative timestamp " + std::to_string(event.timestamp));
    if (event.timestamp < prev_ts)
      error(i, "timestamps out of order (" + std::to_string(event.timestamp) +
                   " after " + std::to_string(prev_ts) + ")");
    prev_ts = std::max(prev_ts, event.timestamp);

    std::visit(
        [&](const auto& payload) {
          using T = std::decay_t<decltype(payload)>;
          if constexpr (std::is_same_v<T, RegionMarker>) {
            bool& open = region_open[payload.region_id];
            if (payload.is_enter == open)
              error(i, "unbalanced region marker (region " +
                           std::to_string(payload.region_id) + ", " +
                           (payload.is_enter ? "enter while open"
                                             : "exit while closed") +
                           ")");
            open = payload.is_enter;
          } else if constexpr (std::is_same_v<T, AllocEvent>) {
            if (payload.size == 0) error(i, "allocation size must be > 0");
            live[payload.base] = i;
          } else if constexpr (std::is_same_v<T, FreeEvent>) {
            auto it = live.find(payload.base);
            if (it == live.end())
              warning(i, "free without matching allocation at " +
                             detail::hex_addr(payload.base));
            else
              live.erase(it);
          } else if constexpr (std::is_same_v<T, WrappedRegionEvent>) {
            if (payload.begin >= payload.end)
              error(i, "wrapped region begin must be below end");
          } else if constexpr (std::is_same_v<T, StaticObjectDecl>) {
            if (payload.size == 0) error(i, "static object size must be > 0");
            if (event.timestamp != 0)
              error(i, "static object declared at t=" +
                           std::to_string(event.timestamp) +
                           " (must be declared at t=0)");
          } else if constexpr (std::is_same_v<T, MultiplexWindow>) {
            if (last_window && *last_window == payload.kind)
              error(i, "consecutive multiplex windows with the same kind");
            last_window = payload.kind;
          } else if constexpr (std::is_same_v<T, MemorySample>) {
            if (prev_counters) {
              auto prev = prev_counters->as_array();
              auto cur = payload.counters.as_array();
              for (std::size_t k = 0; k < prev.size(); ++k) {
                if (cur[k] < prev[k]) {
                  error(i, "counter regression (counter " + std::to_string(k) +
                               " fell from " + std::to_string(prev[k]) +
                               " to " + std::to_string(cur[k]) + ")");
                  break;
                }
              }
            }
            prev_counters = &payload.counters;
            if (payload.callstack.empty())
              error(i, "sample with empty callstack");
          }
        },
        event.payload);
  }
  for (const auto& [region_id, open] : region_open) {
    if (open)
      error(trace.events.size(), "unbalanced region marker (region " +
                                     std::to_string(region_id) +
                                     " still open at end of trace)");
  }
  return diags;
}

inline bool has_errors(const std::vector<Diagnostic>& diags) {
  for (const Diagnostic& d : diags)
    if (d.severity == Severity::Error) return true;
  return false;
}

}  // namespace memfold

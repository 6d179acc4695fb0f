#pragma once

// Time-aware map of the process address space. Built from static-object,
// allocation and wrapped-region records; resolves (address, timestamp) pairs
// to data objects, the stack, or "unnamed".

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "memfold/trace.hpp"

namespace memfold {

inline constexpr std::int64_t kForever = std::numeric_limits<std::int64_t>::max();

enum class ObjectKind : std::uint8_t { Static, Dynamic, Wrapped, Stack };

inline const char* object_kind_name(ObjectKind kind) {
  switch (kind) {
    case ObjectKind::Static: return "static";
    case ObjectKind::Dynamic: return "dynamic";
    case ObjectKind::Wrapped: return "wrapped";
    case ObjectKind::Stack: return "stack";
  }
  return "?";
}

struct DataObject {
  int id = 0;
  ObjectKind kind = ObjectKind::Dynamic;
  std::string label;  // variable name, allocation callsite, or wrap label
  std::uint64_t base = 0;
  std::uint64_t size = 0;
  std::int64_t t_start = 0;         // inclusive
  std::int64_t t_end = kForever;    // exclusive

  std::uint64_t end() const { return base + size; }
  bool contains(std::uint64_t addr) const {
    return addr >= base && addr - base < size;
  }
  bool live_at(std::int64_t ts) const { return ts >= t_start && ts < t_end; }
};

struct ObjectRef {
  enum class Kind : std::uint8_t { Object, Stack, Unnamed };
  Kind kind = Kind::Unnamed;
  int object_id = -1;       // valid when kind == Object
  std::uint64_t offset = 0; // byte offset into the object

  bool is_object() const { return kind == Kind::Object; }

  friend bool operator==(const ObjectRef&, const ObjectRef&) = default;
};

class ObjectMap {
public:
  ObjectMap() = default;
  ObjectMap(std::vector<DataObject> objects, std::uint64_t threshold,
            std::uint64_t stack_floor)
      : objects_(std::move(objects)),
        threshold_(threshold),
        stack_floor_(stack_floor) {
    by_base_.resize(objects_.size());
    for (std::size_t i = 0; i < objects_.size(); ++i) by_base_[i] = i;
    std::sort(by_base_.begin(), by_base_.end(), [&](std::size_t a, std::size_t b) {
      if (objects_[a].base != objects_[b].base)
        return objects_[a].base < objects_[b].base;
      return objects_[a].t_start < objects_[b].t_start;
    });
    prefix_max_end_.resize(by_base_.size());
    std::uint64_t running = 0;
    for (std::size_t i = 0; i < by_base_.size(); ++i) {
      running = std::max(running, objects_[by_base_[i]].end());
      prefix_max_end_[i] = running;
    }
  }

  const std::vector<DataObject>& objects() const { return objects_; }
  std::uint64_t threshold() const { return threshold_; }
  std::uint64_t stack_floor() const { return stack_floor_; }

  const DataObject* find(int object_id) const {
    for (const DataObject& obj : objects_)
      if (obj.id == object_id) return &obj;
    return nullptr;
  }

  // Exactly one variant comes back for any (address, timestamp).
  ObjectRef resolve(std::uint64_t address, std::int64_t timestamp) const {
    // Candidates are objects with base <= address; scan right-to-left until
    // the running max end falls at or below the address.
    std::size_t lo = 0, hi = by_base_.size();
    while (lo < hi) {
      std::size_t mid = (lo + hi) / 2;
      if (objects_[by_base_[mid]].base <= address)
        lo = mid + 1;
      else
        hi = mid;
    }
    for (std::size_t i = lo; i-- > 0;) {
      if (prefix_max_end_[i] <= address) break;
      const DataObject& obj = objects_[by_base_[i]];
      if (obj.contains(address) && obj.live_at(timestamp))
        return {ObjectRef::Kind::Object, obj.id, address - obj.base};
    }
    if (address >= stack_floor_) return {ObjectRef::Kind::Stack, -1, 0};
    return {ObjectRef::Kind::Unnamed, -1, 0};
  }

private:
  std::vector<DataObject> objects_;
  std::uint64_t threshold_ = 0;
  std::uint64_t stack_floor_ = 0;
  std::vector<std::size_t> by_base_;
  std::vector<std::uint64_t> prefix_max_end_;
};

// Builds the object map from a trace. Dynamic allocations below the
// threshold are dropped unless a live wrapped region encloses them, in which
// case the wrap absorbs them (regardless of size). Overlap of tracked
// objects in (address-range x lifetime) is a hard error.
inline ObjectMap build_object_map(const Trace& trace, std::uint64_t threshold,
                                  std::uint64_t stack_floor) {
  if (threshold == 0)
    throw std::invalid_argument("object map: threshold must be positive");

  std::vector<DataObject> objects;
  std::map<std::uint64_t, std::size_t> live_dynamic;  // base -> objects index
  int next_id = 1;

  auto enclosing_live_wrap = [&](std::uint64_t base, std::uint64_t size,
                                 std::int64_t ts) -> const DataObject* {
    for (const DataObject& obj : objects) {
      if (obj.kind != ObjectKind::Wrapped) continue;
      if (!obj.live_at(ts)) continue;
      if (base >= obj.base && base + size <= obj.end()) return &obj;
    }
    return nullptr;
  };

  for (const TraceEvent& event : trace.events) {
    std::visit(
        [&](const auto& payload) {
          using T = std::decay_t<decltype(payload)>;
          if constexpr (std::is_same_v<T, StaticObjectDecl>) {
            objects.push_back({next_id++, ObjectKind::Static, payload.name,
                               payload.base, payload.size, 0, kForever});
          } else if constexpr (std::is_same_v<T, WrappedRegionEvent>) {
            objects.push_back({next_id++, ObjectKind::Wrapped, payload.label,
                               payload.begin, payload.end - payload.begin,
                               event.timestamp, kForever});
          } else if constexpr (std::is_same_v<T, AllocEvent>) {
            if (enclosing_live_wrap(payload.base, payload.size,
                                    event.timestamp))
              return;  // absorbed by the wrap
            if (payload.size < threshold) return;  // below threshold
            live_dynamic[payload.base] = objects.size();
            objects.push_back({next_id++, ObjectKind::Dynamic, payload.callsite,
                               payload.base, payload.size, event.timestamp,
                               kForever});
          } else if constexpr (std::is_same_v<T, FreeEvent>) {
            auto it = live_dynamic.find(payload.base);
            if (it != live_dynamic.end()) {
              objects[it->second].t_end = event.timestamp;
              live_dynamic.erase(it);
            }
          }
        },
        event.payload);
  }

  // Allocations freed in the same nanosecond are unobservable; drop them.
  std::erase_if(objects, [](const DataObject& o) { return o.t_end <= o.t_start; });

  // Overlap check over (address-range x lifetime).
  std::vector<std::size_t> order(objects.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return objects[a].base < objects[b].base;
  });
  for (std::size_t i = 0; i < order.size(); ++i) {
    const DataObject& a = objects[order[i]];
    for (std::size_t j = i + 1; j < order.size(); ++j) {
      const DataObject& b = objects[order[j]];
      if (b.base >= a.end()) break;
      bool lifetimes_meet =
          std::max(a.t_start, b.t_start) < std::min(a.t_end, b.t_end);
      if (lifetimes_meet) {
        throw std::runtime_error(
            "object map: objects overlap: '" + a.label + "' [" +
            detail::hex_addr(a.base) + "," + detail::hex_addr(a.end()) +
            ") and '" + b.label + "' [" + detail::hex_addr(b.base) + "," +
            detail::hex_addr(b.end()) + ")");
      }
    }
  }

  return ObjectMap(std::move(objects), threshold, stack_floor);
}

struct RankedObject {
  int object_id = -1;
  std::string label;
  std::uint64_t size = 0;
  std::uint64_t count = 0;
  double share = 0.0;
};

struct ObjectRanking {
  std::vector<RankedObject> rows;  // descending by share
  std::uint64_t stack_count = 0;
  std::uint64_t unnamed_count = 0;
  std::uint64_t total_samples = 0;

  double stack_share() const {
    return total_samples ? double(stack_count) / double(total_samples) : 0.0;
  }
  double unnamed_share() const {
    return total_samples ? double(unnamed_count) / double(total_samples) : 0.0;
  }
};

// A sampled reference paired with its trace time; resolution is time-aware.
struct TimedSample {
  std::int64_t timestamp = 0;
  const MemorySample* sample = nullptr;
};

inline ObjectRanking rank_objects(const ObjectMap& map,
                                  std::span<const TimedSample> samples) {
  ObjectRanking ranking;
  std::map<int, std::uint64_t> counts;
  for (const TimedSample& ts : samples) {
    if (ts.sample->is_pseudo()) continue;
    ++ranking.total_samples;
    ObjectRef ref = map.resolve(ts.sample->address, ts.timestamp);
    switch (ref.kind) {
      case ObjectRef::Kind::Object: ++counts[ref.object_id]; break;
      case ObjectRef::Kind::Stack: ++ranking.stack_count; break;
      case ObjectRef::Kind::Unnamed: ++ranking.unnamed_count; break;
    }
  }
  for (const auto& [id, count] : counts) {
    const DataObject* obj = map.find(id);
    ranking.rows.push_back({id, obj ? obj->label : std::string("?"),
                            obj ? obj->size : 0, count,
                            double(count) / double(ranking.total_samples)});
  }
  std::sort(ranking.rows.begin(), ranking.rows.end(),
            [](const RankedObject& a, const RankedObject& b) {
              if (a.count != b.count) return a.count > b.count;
              return a.object_id < b.object_id;
            });
  return ranking;
}

inline ObjectRanking rank_objects(const ObjectMap& map,
                                  const std::vector<TraceEvent>& events) {
  std::vector<TimedSample> samples;
  for (const TraceEvent& event : events)
    if (const auto* s = std::get_if<MemorySample>(&event.payload))
      samples.push_back({event.timestamp, s});
  return rank_objects(map, samples);
}

}  // namespace memfold

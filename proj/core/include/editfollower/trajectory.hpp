#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace ebg::traj {

// One sample of a car-following pair on the uniform dt grid.
struct TrajectoryPoint {
  double t = 0.0;        // s
  double v_lv = 0.0;     // lead vehicle speed, m/s
  double v_fv = 0.0;     // following vehicle speed, m/s
  double spacing = 0.0;  // bumper-to-bumper gap, m (> 0)
};

// A car-following episode: one follower tracking one constant leader.
struct TrajectoryEvent {
  std::string event_id;
  std::string lv_id;
  double dt = 0.1;
  std::vector<TrajectoryPoint> points;

  int size() const { return static_cast<int>(points.size()); }
  double duration() const {
    return points.size() < 2 ? 0.0 : static_cast<double>(points.size() - 1) * dt;
  }
  std::vector<double> fv_speeds() const;
  std::vector<double> lv_speeds() const;
  std::vector<double> spacings() const;
};

// Maps canonical column names onto the CSV header actually present.
struct ColumnMapping {
  std::string event_id = "event_id";
  std::string t = "t";
  std::string lv_id = "lv_id";
  std::string v_lv = "v_lv";
  std::string v_fv = "v_fv";
  std::string spacing = "spacing";
};

struct LoadOptions {
  ColumnMapping columns;
  double dt = 0.1;  // canonical grid; inputs are resampled onto it
};

// Reads candidate events from CSV. Rows must be sorted by (event_id, t);
// an lv_id change inside an event starts a new candidate segment. Series
// are linearly interpolated onto the dt grid (identity when already on it).
// A zero-byte or header-only file yields an empty result. Segments with
// fewer than two grid points are dropped.
std::vector<TrajectoryEvent> load_events(const std::string& path, const LoadOptions& opts = {});

struct ExtractResult {
  std::vector<TrajectoryEvent> events;
  int rejected = 0;
};

// Keeps candidates with a constant leader and duration strictly greater
// than min_duration seconds. Never throws for rejected segments.
ExtractResult extract_events(const std::vector<TrajectoryEvent>& candidates,
                             double min_duration = 15.0);

// Forward differences of the FV speed series.
// accel[t] = (v[t+1] - v[t]) / dt, length n-1
// jerk[t]  = (a[t+1] - a[t]) / dt, length n-2
struct Kinematics {
  std::vector<double> accel;
  std::vector<double> jerk;
};
Kinematics kinematics(const TrajectoryEvent& event);

std::vector<double> forward_diff(std::span<const double> x, double dt);

// Event-level 70/15/15 partition (floor, remainder to train).
struct SplitAssignment {
  std::vector<std::string> train;  // sorted
  std::vector<std::string> val;    // sorted
  std::vector<std::string> test;   // sorted

  bool in_train(const std::string& id) const;
  bool in_val(const std::string& id) const;
  bool in_test(const std::string& id) const;
};

SplitAssignment split(const std::vector<TrajectoryEvent>& events, std::uint64_t seed);

// Events CSV (schema: event_id,t,lv_id,v_lv,v_fv,spacing).
void write_events_csv(const std::string& path, const std::vector<TrajectoryEvent>& events);

}  // namespace ebg::traj

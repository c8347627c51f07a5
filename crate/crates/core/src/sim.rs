//! Discrete-tick simulator of a building where several cars share each
//! elevator shaft. Calls arrive as a Bernoulli process, a greedy dispatcher
//! assigns them to feasible cars, and every call emits four lifecycle events
//! (`New`, `Assign`, `Load`, `Unload`) that form the training logs.
//!
//! Cars in one shaft can never pass each other: the car with the smaller
//! index stays strictly below its neighbour at all times. Idle cars yield by
//! sliding one floor per tick when an active neighbour needs their floor;
//! assigned cars never yield, so the dispatcher only accepts trips whose
//! whole floor range stays clear of other active cars in the shaft.

use crate::codec::{EventKind, LogEvent};
use crate::config::{ConfigError, KvConfig, KvWriter};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;

/// Ticks a car sits at a stop before the load or unload completes.
const DWELL_TICKS: u64 = 2;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid building configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Static description of the building plus the RNG seed for call arrivals.
#[derive(Debug, Clone, PartialEq)]
pub struct BuildingConfig {
    pub num_shafts: u32,
    pub cars_per_shaft: u32,
    /// Floors are numbered 1..=num_floors.
    pub num_floors: u32,
    pub car_capacity: u32,
    /// Probability of a new call on each tick.
    pub arrival_rate: f64,
    pub seed: u64,
}

impl Default for BuildingConfig {
    fn default() -> Self {
        BuildingConfig {
            num_shafts: 5,
            cars_per_shaft: 3,
            num_floors: 30,
            car_capacity: 10,
            arrival_rate: 0.0055,
            seed: 0,
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "num_shafts",
    "cars_per_shaft",
    "num_floors",
    "car_capacity",
    "arrival_rate",
    "seed",
    "t_max",
];

impl BuildingConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::InvalidConfig(msg));
        if self.num_shafts < 1 || self.num_shafts > 99 {
            return fail(format!(
                "num_shafts must be in 1..=99, got {}",
                self.num_shafts
            ));
        }
        if self.cars_per_shaft < 1 || self.cars_per_shaft > 99 {
            return fail(format!(
                "cars_per_shaft must be in 1..=99, got {}",
                self.cars_per_shaft
            ));
        }
        if self.num_floors < 2 {
            return fail(format!(
                "num_floors must be at least 2, got {}",
                self.num_floors
            ));
        }
        if self.cars_per_shaft > self.num_floors {
            return fail(format!(
                "{} cars cannot stack inside {} floors",
                self.cars_per_shaft, self.num_floors
            ));
        }
        if self.car_capacity < 1 {
            return fail("car_capacity must be at least 1".to_string());
        }
        if !(0.0..=1.0).contains(&self.arrival_rate) {
            return fail(format!(
                "arrival_rate must be a probability in [0, 1], got {}",
                self.arrival_rate
            ));
        }
        Ok(())
    }

    /// Serializes as `key=value` lines; `t_max` is a run horizon that rides
    /// along in the same file without being part of the building itself.
    pub fn to_kv(&self, t_max: Option<u64>) -> String {
        let mut out = KvWriter::new();
        out.push("num_shafts", self.num_shafts);
        out.push("cars_per_shaft", self.cars_per_shaft);
        out.push("num_floors", self.num_floors);
        out.push("car_capacity", self.car_capacity);
        out.push("arrival_rate", self.arrival_rate);
        out.push("seed", self.seed);
        if let Some(t_max) = t_max {
            out.push("t_max", t_max);
        }
        out.to_string()
    }
}

/// Parses a config from `key=value` text. Missing keys take defaults;
/// unknown keys are rejected. Returns the building plus the optional
/// `t_max` horizon the file may carry.
pub fn parse_config(text: &str) -> Result<(BuildingConfig, Option<u64>), SimError> {
    config_from_kv(&KvConfig::parse(text)?)
}

pub fn load_config(path: &Path) -> Result<(BuildingConfig, Option<u64>), SimError> {
    config_from_kv(&KvConfig::load(path)?)
}

fn config_from_kv(kv: &KvConfig) -> Result<(BuildingConfig, Option<u64>), SimError> {
    kv.reject_unknown_keys(CONFIG_KEYS)?;
    let defaults = BuildingConfig::default();
    let config = BuildingConfig {
        num_shafts: kv.parsed("num_shafts", defaults.num_shafts)?,
        cars_per_shaft: kv.parsed("cars_per_shaft", defaults.cars_per_shaft)?,
        num_floors: kv.parsed("num_floors", defaults.num_floors)?,
        car_capacity: kv.parsed("car_capacity", defaults.car_capacity)?,
        arrival_rate: kv.parsed("arrival_rate", defaults.arrival_rate)?,
        seed: kv.parsed("seed", defaults.seed)?,
    };
    config.validate()?;
    let t_max = match kv.get("t_max") {
        None => None,
        Some(_) => Some(kv.parsed("t_max", 0u64)?),
    };
    Ok((config, t_max))
}

/// Identifies one car: shaft and position-within-shaft, both 1-based.
/// Index 1 is the lowest car in the shaft.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CarId {
    pub shaft: u32,
    pub car: u32,
}

impl fmt::Display for CarId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "car_{:02}_{:02}", self.shaft, self.car)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Up,
    Down,
    Idle,
}

/// What a car does when it reaches a stop floor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopAction {
    Load(u64),
    Unload(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stop {
    pub floor: u32,
    pub action: StopAction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarState {
    pub id: CarId,
    pub position: u32,
    pub direction: Direction,
    /// Guests currently aboard.
    pub load: u32,
    /// Remaining stops, front first.
    pub itinerary: VecDeque<Stop>,
    /// Tick the car arrived at the current stop floor, while dwelling.
    dwell_started: Option<u64>,
    /// Floors traveled since the last load; feeds the overtravel figure.
    travel_since_load: u32,
}

impl CarState {
    fn new(id: CarId, position: u32) -> Self {
        CarState {
            id,
            position,
            direction: Direction::Idle,
            load: 0,
            itinerary: VecDeque::new(),
            dwell_started: None,
            travel_since_load: 0,
        }
    }

    fn is_active(&self) -> bool {
        !self.itinerary.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CallPhase {
    Pending,
    Assigned,
    InTransit,
    Completed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Call {
    pub id: u64,
    pub origin: u32,
    pub destination: u32,
    pub guests: u32,
    pub phase: CallPhase,
    pub assigned_car: Option<CarId>,
    pub t_new: Option<u64>,
    pub t_assign: Option<u64>,
    pub t_load: Option<u64>,
    pub t_unload: Option<u64>,
    /// Floors traveled beyond the direct origin→destination distance.
    pub overtravel: Option<u32>,
}

/// Extra floors the car covered between load and unload, beyond the direct
/// distance. Zero for a straight trip.
pub fn compute_overtravel(car: &CarState, call: &Call) -> u32 {
    car.travel_since_load
        .saturating_sub(call.origin.abs_diff(call.destination))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    config: BuildingConfig,
    clock: u64,
    cars: Vec<CarState>,
    calls: BTreeMap<u64, Call>,
    /// Call ids awaiting assignment, ascending.
    pending: Vec<u64>,
    next_call_id: u64,
    rng: ChaCha8Rng,
    tick_events: Vec<LogEvent>,
}

/// Builds the initial state: cars idle and stacked from the bottom, car k of
/// each shaft parked on floor k, clock zero, no calls.
pub fn new_simulation(config: &BuildingConfig) -> Result<SimState, SimError> {
    config.validate()?;
    let mut cars = Vec::with_capacity((config.num_shafts * config.cars_per_shaft) as usize);
    for shaft in 1..=config.num_shafts {
        for car in 1..=config.cars_per_shaft {
            cars.push(CarState::new(CarId { shaft, car }, car));
        }
    }
    Ok(SimState {
        config: config.clone(),
        clock: 0,
        cars,
        calls: BTreeMap::new(),
        pending: Vec::new(),
        next_call_id: 1,
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        tick_events: Vec::new(),
    })
}

/// Runs a fresh simulation for `t_max` ticks and returns every event emitted.
pub fn run(config: &BuildingConfig, t_max: u64) -> Result<Vec<LogEvent>, SimError> {
    let mut sim = new_simulation(config)?;
    let mut events = Vec::new();
    for _ in 0..t_max {
        events.extend(sim.step());
    }
    Ok(events)
}

impl SimState {
    pub fn config(&self) -> &BuildingConfig {
        &self.config
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn cars(&self) -> &[CarState] {
        &self.cars
    }

    pub fn car(&self, id: CarId) -> &CarState {
        let idx = (id.shaft - 1) * self.config.cars_per_shaft + (id.car - 1);
        &self.cars[idx as usize]
    }

    pub fn call(&self, id: u64) -> Option<&Call> {
        self.calls.get(&id)
    }

    pub fn calls(&self) -> impl Iterator<Item = &Call> {
        self.calls.values()
    }

    /// True when no call is pending and every car has finished its itinerary.
    pub fn is_quiescent(&self) -> bool {
        self.pending.is_empty() && self.cars.iter().all(|car| !car.is_active())
    }

    /// Advances one tick: possibly admit a random call, try to assign every
    /// pending call (in call-id order), move cars at most one floor, then
    /// complete any load/unload whose dwell has elapsed. Returns the events
    /// emitted during the tick, in emission order.
    pub fn step(&mut self) -> Vec<LogEvent> {
        self.clock += 1;
        self.maybe_generate_call();
        let pending: Vec<u64> = self.pending.clone();
        for id in pending {
            self.assign_call(id);
        }
        self.move_cars();
        self.service_stops();
        self.check_invariants();
        std::mem::take(&mut self.tick_events)
    }

    /// One Bernoulli draw per call: with probability `arrival_rate` admits a
    /// call with origin ≠ destination drawn uniformly and guests in 1..=10.
    pub fn maybe_generate_call(&mut self) -> Option<Call> {
        let draw: f64 = self.rng.random();
        if draw >= self.config.arrival_rate {
            return None;
        }
        let floors = self.config.num_floors;
        let origin = self.rng.random_range(1..=floors);
        // Uniform over the remaining floors: draw from a range one short and
        // skip past the origin.
        let other = self.rng.random_range(1..=floors - 1);
        let destination = if other >= origin { other + 1 } else { other };
        let guests = self.rng.random_range(1..=10u32);
        Some(self.admit_call(origin, destination, guests))
    }

    /// Admits a scripted call, emitting its New event at the current clock.
    pub fn inject_call(
        &mut self,
        origin: u32,
        destination: u32,
        guests: u32,
    ) -> Result<u64, SimError> {
        let floors = self.config.num_floors;
        if origin < 1 || origin > floors || destination < 1 || destination > floors {
            return Err(SimError::InvalidConfig(format!(
                "call floors must lie in 1..={floors}"
            )));
        }
        if origin == destination {
            return Err(SimError::InvalidConfig(
                "call origin and destination must differ".to_string(),
            ));
        }
        if guests < 1 {
            return Err(SimError::InvalidConfig(
                "calls carry at least one guest".to_string(),
            ));
        }
        Ok(self.admit_call(origin, destination, guests).id)
    }

    fn admit_call(&mut self, origin: u32, destination: u32, guests: u32) -> Call {
        let id = self.next_call_id;
        self.next_call_id += 1;
        let call = Call {
            id,
            origin,
            destination,
            guests,
            phase: CallPhase::Pending,
            assigned_car: None,
            t_new: Some(self.clock),
            t_assign: None,
            t_load: None,
            t_unload: None,
            overtravel: None,
        };
        self.calls.insert(id, call.clone());
        self.pending.push(id);
        self.tick_events.push(LogEvent {
            time: self.clock,
            call_id: id,
            kind: EventKind::New {
                origin,
                destination,
                guests,
            },
        });
        call
    }

    /// Assigns a pending call to the feasible car with the shortest distance
    /// to the origin (ties: lowest shaft, then lowest car). Returns None and
    /// leaves the call pending when no car qualifies this tick.
    pub fn assign_call(&mut self, call_id: u64) -> Option<CarId> {
        let call = self.calls.get(&call_id)?;
        if call.phase != CallPhase::Pending {
            return None;
        }
        let (origin, destination, guests) = (call.origin, call.destination, call.guests);

        let mut best: Option<(u32, usize)> = None;
        for (idx, car) in self.cars.iter().enumerate() {
            if car.is_active() {
                continue;
            }
            if car.load + guests > self.config.car_capacity {
                continue;
            }
            if !self.trip_feasible(idx, origin, destination) {
                continue;
            }
            let eta = car.position.abs_diff(origin);
            if best.map_or(true, |(best_eta, _)| eta < best_eta) {
                best = Some((eta, idx));
            }
        }
        let (_, idx) = best?;

        let car = &mut self.cars[idx];
        car.itinerary.push_back(Stop {
            floor: origin,
            action: StopAction::Load(call_id),
        });
        car.itinerary.push_back(Stop {
            floor: destination,
            action: StopAction::Unload(call_id),
        });
        let car_id = car.id;

        let call = self.calls.get_mut(&call_id).expect("call exists");
        call.phase = CallPhase::Assigned;
        call.assigned_car = Some(car_id);
        call.t_assign = Some(self.clock);
        self.pending.retain(|&p| p != call_id);
        self.tick_events.push(LogEvent {
            time: self.clock,
            call_id,
            kind: EventKind::Assign { car: car_id },
        });
        Some(car_id)
    }

    /// A trip is feasible for a car when the whole floor range it will sweep
    /// (current position, origin, destination) fits inside the shaft given
    /// the cars above and below: idle neighbours can be shooed away floor by
    /// floor, active neighbours own their own sweep ranges and cannot move
    /// aside, so the ranges must be disjoint with enough spare floors for the
    /// idle cars parked between them.
    fn trip_feasible(&self, idx: usize, origin: u32, destination: u32) -> bool {
        let per_shaft = self.config.cars_per_shaft as usize;
        let shaft_base = idx - idx % per_shaft;
        let within = idx - shaft_base; // 0-based index inside the shaft
        let shaft = &self.cars[shaft_base..shaft_base + per_shaft];
        let car = &shaft[within];

        let lo = car.position.min(origin).min(destination);
        let hi = car.position.max(origin).max(destination);

        // Cars below must fit under lo, cars above must fit over hi.
        let below = within as u32;
        let above = (per_shaft - 1 - within) as u32;
        if lo <= below {
            return false;
        }
        if hi + above > self.config.num_floors {
            return false;
        }

        // Nearest active car below: its sweep range, plus one floor for every
        // idle car parked between us, must end strictly under lo.
        for j in (0..within).rev() {
            if !shaft[j].is_active() {
                continue;
            }
            let idle_between = (within - j - 1) as u32;
            let (_, other_hi) = active_envelope(&shaft[j]);
            if other_hi + idle_between >= lo {
                return false;
            }
            break;
        }
        // Same on the upper side.
        for (gap, other) in shaft[within + 1..].iter().enumerate() {
            if !other.is_active() {
                continue;
            }
            let (other_lo, _) = active_envelope(other);
            if hi + gap as u32 >= other_lo {
                return false;
            }
            break;
        }
        true
    }

    /// Moves every car at most one floor toward its next stop. Active cars
    /// push adjacent idle neighbours ahead of them; anything else blocked by
    /// a neighbour waits. Lower-indexed cars stay strictly below throughout.
    fn move_cars(&mut self) {
        let per_shaft = self.config.cars_per_shaft as usize;
        let floors = self.config.num_floors;
        for shaft in self.cars.chunks_mut(per_shaft) {
            let count = shaft.len();
            let mut desired = vec![0i8; count];
            for (i, car) in shaft.iter().enumerate() {
                if let Some(stop) = car.itinerary.front() {
                    desired[i] = match stop.floor.cmp(&car.position) {
                        std::cmp::Ordering::Greater => 1,
                        std::cmp::Ordering::Less => -1,
                        std::cmp::Ordering::Equal => 0,
                    };
                }
            }

            // A mover pushes a directly adjacent idle neighbour, and the push
            // propagates through a parked chain.
            for i in 0..count.saturating_sub(1) {
                if desired[i] == 1
                    && desired[i + 1] == 0
                    && !shaft[i + 1].is_active()
                    && shaft[i + 1].position == shaft[i].position + 1
                {
                    desired[i + 1] = 1;
                }
            }
            for i in (1..count).rev() {
                if desired[i] == -1
                    && desired[i - 1] == 0
                    && !shaft[i - 1].is_active()
                    && shaft[i - 1].position + 1 == shaft[i].position
                {
                    desired[i - 1] = -1;
                }
            }

            // Upward movers go top-down so each sees its neighbour's new spot;
            // a move that would touch the neighbour is simply skipped.
            for i in (0..count).rev() {
                if desired[i] != 1 {
                    continue;
                }
                let ceiling = if i + 1 < count {
                    shaft[i + 1].position - 1
                } else {
                    floors
                };
                if shaft[i].position < ceiling {
                    shaft[i].position += 1;
                    if shaft[i].load > 0 {
                        shaft[i].travel_since_load += 1;
                    }
                }
            }
            // Downward movers go bottom-up for the same reason.
            for i in 0..count {
                if desired[i] != -1 {
                    continue;
                }
                let floor_limit = if i > 0 { shaft[i - 1].position + 1 } else { 1 };
                if shaft[i].position > floor_limit {
                    shaft[i].position -= 1;
                    if shaft[i].load > 0 {
                        shaft[i].travel_since_load += 1;
                    }
                }
            }

            for car in shaft.iter_mut() {
                car.direction = match car.itinerary.front() {
                    Some(stop) if stop.floor > car.position => Direction::Up,
                    Some(stop) if stop.floor < car.position => Direction::Down,
                    _ => Direction::Idle,
                };
            }
        }
    }

    /// Completes loads/unloads whose dwell has elapsed. A car arriving at its
    /// stop floor starts dwelling; the action fires DWELL_TICKS later.
    fn service_stops(&mut self) {
        let clock = self.clock;
        for idx in 0..self.cars.len() {
            let car = &mut self.cars[idx];
            let Some(stop) = car.itinerary.front() else {
                car.dwell_started = None;
                continue;
            };
            if car.position != stop.floor {
                car.dwell_started = None;
                continue;
            }
            match car.dwell_started {
                None => {
                    car.dwell_started = Some(clock);
                    continue;
                }
                Some(start) if clock < start + DWELL_TICKS => continue,
                Some(_) => {}
            }

            let stop = car.itinerary.pop_front().expect("stop present");
            car.dwell_started = None;
            let car_id = car.id;
            match stop.action {
                StopAction::Load(call_id) => {
                    let guests = self.calls[&call_id].guests;
                    let car = &mut self.cars[idx];
                    car.load += guests;
                    car.travel_since_load = 0;
                    let call = self.calls.get_mut(&call_id).expect("call exists");
                    call.phase = CallPhase::InTransit;
                    call.t_load = Some(clock);
                    self.tick_events.push(LogEvent {
                        time: clock,
                        call_id,
                        kind: EventKind::Load { car: car_id },
                    });
                }
                StopAction::Unload(call_id) => {
                    let overtravel = compute_overtravel(&self.cars[idx], &self.calls[&call_id]);
                    let guests = self.calls[&call_id].guests;
                    let car = &mut self.cars[idx];
                    car.load -= guests;
                    let call = self.calls.get_mut(&call_id).expect("call exists");
                    call.phase = CallPhase::Completed;
                    call.t_unload = Some(clock);
                    call.overtravel = Some(overtravel);
                    self.tick_events.push(LogEvent {
                        time: clock,
                        call_id,
                        kind: EventKind::Unload {
                            car: car_id,
                            overtravel,
                        },
                    });
                }
            }
        }
    }

    /// Hard safety net, checked after every tick: strict vertical ordering
    /// per shaft, positions inside the building, loads within capacity.
    fn check_invariants(&self) {
        let per_shaft = self.config.cars_per_shaft as usize;
        for shaft in self.cars.chunks(per_shaft) {
            for pair in shaft.windows(2) {
                assert!(
                    pair[0].position < pair[1].position,
                    "cars {} and {} out of order at tick {}",
                    pair[0].id,
                    pair[1].id,
                    self.clock
                );
            }
        }
        for car in &self.cars {
            assert!(
                car.position >= 1 && car.position <= self.config.num_floors,
                "{} left the building at tick {}",
                car.id,
                self.clock
            );
            assert!(
                car.load <= self.config.car_capacity,
                "{} overloaded at tick {}",
                car.id,
                self.clock
            );
        }
    }
}

/// Floor range an active car still owns: its position plus remaining stops.
fn active_envelope(car: &CarState) -> (u32, u32) {
    let mut lo = car.position;
    let mut hi = car.position;
    for stop in &car.itinerary {
        lo = lo.min(stop.floor);
        hi = hi.max(stop.floor);
    }
    (lo, hi)
}

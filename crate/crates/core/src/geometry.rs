//! Bounding-box algebra for the search MDP: the nine box actions, box
//! transforms with scene clamping, IoU, reward functions, and the
//! action-history encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest admissible box side after clamping.
pub const MIN_SIZE: f64 = 0.02;
/// Default per-action geometric factor.
pub const DEFAULT_ALPHA: f64 = 0.2;
/// Default IoU threshold for a rewarded trigger.
pub const DEFAULT_TAU: f64 = 0.6;
/// Default trigger reward magnitude.
pub const DEFAULT_ETA: f64 = 3.0;
/// Number of past actions kept in the history.
pub const HISTORY_LEN: usize = 10;
/// Number of discrete actions.
pub const NUM_ACTIONS: usize = 9;
/// Length of the one-hot history encoding.
pub const HISTORY_ENCODING_LEN: usize = HISTORY_LEN * NUM_ACTIONS;

/// Axis-aligned box in continuous scene coordinates; the unit scene is
/// `[0,1] × [0,1]` with `y` growing downwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Bbox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "degenerate box {w}x{h}");
        Bbox { x, y, w, h }
    }

    /// The whole unit scene.
    pub fn full_scene() -> Self {
        Bbox::new(0.0, 0.0, 1.0, 1.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Bbox::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    /// Positive-area overlap with another box.
    pub fn intersects(&self, other: &Bbox) -> bool {
        self.x < other.x + other.w
            && other.x < self.x + self.w
            && self.y < other.y + other.h
            && other.y < self.y + self.h
    }

    pub fn intersection_area(&self, other: &Bbox) -> f64 {
        let iw = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let ih = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if iw > 0.0 && ih > 0.0 {
            iw * ih
        } else {
            0.0
        }
    }

    pub fn inside_unit_scene(&self) -> bool {
        self.x >= 0.0 && self.y >= 0.0 && self.x + self.w <= 1.0 + 1e-12 && self.y + self.h <= 1.0 + 1e-12
    }

    /// Scales width and height by `factor` about the center.
    pub fn scaled_about_center(&self, factor: f64) -> Self {
        let (cx, cy) = self.center();
        Bbox::from_center(cx, cy, self.w * factor, self.h * factor)
    }

    /// All invariants of a clamped box: positive minimum size, inside the
    /// unit scene.
    pub fn is_valid(&self) -> bool {
        self.w >= MIN_SIZE && self.h >= MIN_SIZE && self.inside_unit_scene()
    }
}

/// The nine box actions. Integer codes 0..8 are stable; they index both the
/// network output and the history encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    MoveRight,
    MoveLeft,
    MoveUp,
    MoveDown,
    ScaleBigger,
    ScaleSmaller,
    Fatter,
    Taller,
    Trigger,
}

pub const ALL_ACTIONS: [Action; NUM_ACTIONS] = [
    Action::MoveRight,
    Action::MoveLeft,
    Action::MoveUp,
    Action::MoveDown,
    Action::ScaleBigger,
    Action::ScaleSmaller,
    Action::Fatter,
    Action::Taller,
    Action::Trigger,
];

impl Action {
    pub fn code(self) -> usize {
        match self {
            Action::MoveRight => 0,
            Action::MoveLeft => 1,
            Action::MoveUp => 2,
            Action::MoveDown => 3,
            Action::ScaleBigger => 4,
            Action::ScaleSmaller => 5,
            Action::Fatter => 6,
            Action::Taller => 7,
            Action::Trigger => 8,
        }
    }

    pub fn from_code(code: usize) -> Result<Self> {
        ALL_ACTIONS
            .get(code)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("action code {code} out of range")))
    }

    pub fn is_trigger(self) -> bool {
        self == Action::Trigger
    }
}

/// Ring buffer of the last [`HISTORY_LEN`] action codes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ActionHistory {
    // most recent first
    codes: Vec<usize>,
}

impl ActionHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, action: Action) {
        self.codes.insert(0, action.code());
        self.codes.truncate(HISTORY_LEN);
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }
}

/// Slot-wise one-hot encoding: slot `k` holds the one-hot of the `k`-th most
/// recent action; unfilled slots stay zero.
pub fn encode_history(history: &ActionHistory) -> [f64; HISTORY_ENCODING_LEN] {
    let mut out = [0.0; HISTORY_ENCODING_LEN];
    for (slot, &code) in history.codes.iter().enumerate() {
        out[slot * NUM_ACTIONS + code] = 1.0;
    }
    out
}

/// Applies a transform action to a box with factor `alpha`, then clamps the
/// result into the unit scene. Translations keep the box size and clamp only
/// the position; scalings clamp the size first and then shift the box back
/// inside if needed.
pub fn apply_action(b: &Bbox, action: Action, alpha: f64) -> Result<Bbox> {
    if action.is_trigger() {
        return Err(Error::InvalidArgument(
            "trigger does not transform the box".into(),
        ));
    }
    if !(0.0..1.0).contains(&alpha) || alpha == 0.0 {
        return Err(Error::InvalidArgument(format!(
            "action factor must lie in (0,1), got {alpha}"
        )));
    }
    let moved = match action {
        Action::MoveRight => Bbox::new(b.x + alpha * b.w, b.y, b.w, b.h),
        Action::MoveLeft => Bbox::new(b.x - alpha * b.w, b.y, b.w, b.h),
        Action::MoveUp => Bbox::new(b.x, b.y - alpha * b.h, b.w, b.h),
        Action::MoveDown => Bbox::new(b.x, b.y + alpha * b.h, b.w, b.h),
        Action::ScaleBigger => b.scaled_about_center(1.0 + alpha),
        Action::ScaleSmaller => b.scaled_about_center(1.0 / (1.0 + alpha)),
        Action::Fatter => {
            let (cx, cy) = b.center();
            Bbox::from_center(cx, cy, b.w * (1.0 + alpha), b.h / (1.0 + alpha))
        }
        Action::Taller => {
            let (cx, cy) = b.center();
            Bbox::from_center(cx, cy, b.w / (1.0 + alpha), b.h * (1.0 + alpha))
        }
        Action::Trigger => unreachable!(),
    };
    Ok(clamp_to_scene(&moved))
}

/// Clamps size into `[MIN_SIZE, 1]` and position into the unit scene. A box
/// whose size is unchanged keeps its exact coordinates apart from the border
/// clamp; a size-clamped box is re-centered before the shift inside.
pub fn clamp_to_scene(b: &Bbox) -> Bbox {
    let w = b.w.clamp(MIN_SIZE, 1.0);
    let h = b.h.clamp(MIN_SIZE, 1.0);
    let x = if w == b.w { b.x } else { b.x + (b.w - w) / 2.0 };
    let y = if h == b.h { b.y } else { b.y + (b.h - h) / 2.0 };
    Bbox::new(x.clamp(0.0, 1.0 - w), y.clamp(0.0, 1.0 - h), w, h)
}

/// Intersection area over union area; 0 for disjoint boxes, exactly 1 for
/// identical ones.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    if a == b {
        return 1.0;
    }
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Per-step reward: the sign of the IoU change against the ground truth.
pub fn step_reward(b: &Bbox, b_next: &Bbox, g: &Bbox) -> f64 {
    let delta = iou(b_next, g) - iou(b, g);
    if delta > 0.0 {
        1.0
    } else if delta < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Trigger reward: `+eta` when `iou(b,g) ≥ tau`, else `-eta`. The boundary
/// counts as success.
pub fn trigger_reward(b: &Bbox, g: &Bbox, tau: f64, eta: f64) -> f64 {
    if iou(b, g) >= tau {
        eta
    } else {
        -eta
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn action_codes_are_stable() {
        for (i, a) in ALL_ACTIONS.iter().enumerate() {
            assert_eq!(a.code(), i);
            assert_eq!(Action::from_code(i).unwrap(), *a);
        }
        assert!(Action::from_code(9).is_err());
    }

    #[test]
    fn move_right_hand_arithmetic() {
        let b = Bbox::new(0.1, 0.1, 0.4, 0.4);
        let next = apply_action(&b, Action::MoveRight, 0.2).unwrap();
        assert!((next.x - 0.18).abs() < 1e-12);
        assert_eq!((next.y, next.w, next.h), (0.1, 0.4, 0.4));
    }

    #[test]
    fn scale_pair_inverts_away_from_borders() {
        let b = Bbox::new(0.3, 0.3, 0.2, 0.25);
        let bigger = apply_action(&b, Action::ScaleBigger, 0.2).unwrap();
        let back = apply_action(&bigger, Action::ScaleSmaller, 0.2).unwrap();
        assert!((back.x - b.x).abs() < 1e-12);
        assert!((back.y - b.y).abs() < 1e-12);
        assert!((back.w - b.w).abs() < 1e-12);
        assert!((back.h - b.h).abs() < 1e-12);
    }

    #[test]
    fn move_right_clamps_at_border_preserving_size() {
        let b = Bbox::new(0.7, 0.2, 0.3, 0.3);
        let next = apply_action(&b, Action::MoveRight, 0.2).unwrap();
        assert!((next.x + next.w - 1.0).abs() < 1e-12);
        assert_eq!(next.w, 0.3);
        assert_eq!(next.h, 0.3);
    }

    #[test]
    fn trigger_is_rejected_as_transform() {
        let b = Bbox::full_scene();
        assert!(apply_action(&b, Action::Trigger, 0.2).is_err());
    }

    #[test]
    fn alpha_outside_open_interval_is_rejected() {
        let b = Bbox::full_scene();
        assert!(apply_action(&b, Action::MoveLeft, 0.0).is_err());
        assert!(apply_action(&b, Action::MoveLeft, 1.0).is_err());
    }

    #[test]
    fn iou_identity_disjoint_and_hand_case() {
        let a = Bbox::new(0.2, 0.2, 0.3, 0.3);
        assert_eq!(iou(&a, &a), 1.0);

        let b = Bbox::new(0.6, 0.6, 0.2, 0.2);
        assert_eq!(iou(&a, &b), 0.0);

        // inter 0.01, union 0.07
        let c = Bbox::new(0.0, 0.0, 0.2, 0.2);
        let d = Bbox::new(0.1, 0.1, 0.2, 0.2);
        assert!((iou(&c, &d) - 1.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn step_reward_signs() {
        let g = Bbox::new(0.4, 0.4, 0.2, 0.2);
        let far = Bbox::new(0.0, 0.0, 0.2, 0.2);
        let near = Bbox::new(0.35, 0.35, 0.2, 0.2);
        assert_eq!(step_reward(&far, &near, &g), 1.0);
        assert_eq!(step_reward(&near, &far, &g), -1.0);
        assert_eq!(step_reward(&near, &near, &g), 0.0);
    }

    #[test]
    fn trigger_reward_boundary_counts_as_success() {
        let g = Bbox::new(0.25, 0.25, 0.5, 0.5);
        assert_eq!(trigger_reward(&g, &g, 0.6, 3.0), 3.0);
        let miss = Bbox::new(0.0, 0.0, 0.1, 0.1);
        assert_eq!(trigger_reward(&miss, &g, 0.6, 3.0), -3.0);

        // pair with IoU exactly 0.5, tested at tau = 0.5
        let half = Bbox::new(0.25, 0.25, 0.25, 0.5);
        assert_eq!(iou(&half, &g), 0.5);
        assert_eq!(trigger_reward(&half, &g, 0.5, 3.0), 3.0);
    }

    #[test]
    fn history_encoding_basics() {
        let mut h = ActionHistory::new();
        assert!(encode_history(&h).iter().all(|&v| v == 0.0));

        h.push(Action::MoveDown); // code 3
        let enc = encode_history(&h);
        assert_eq!(enc[3], 1.0);
        assert_eq!(enc.iter().sum::<f64>(), 1.0);

        // 11 pushes: oldest evicted, 10 ones total, most recent in slot 0
        let mut h = ActionHistory::new();
        for _ in 0..10 {
            h.push(Action::MoveLeft);
        }
        h.push(Action::Trigger);
        let enc = encode_history(&h);
        assert_eq!(enc.iter().sum::<f64>(), 10.0);
        assert_eq!(enc[8], 1.0); // trigger is most recent
        assert_eq!(h.len(), 10);
    }

    fn arb_box() -> impl Strategy<Value = Bbox> {
        (0.0..0.9f64, 0.0..0.9f64, 0.02..0.8f64, 0.02..0.8f64).prop_map(|(x, y, w, h)| {
            clamp_to_scene(&Bbox::new(x, y, w, h))
        })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou(&a, &b);
            let ba = iou(&b, &a);
            prop_assert!((ab - ba).abs() < 1e-15);
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou(&a, &a), 1.0);
        }

        #[test]
        fn apply_action_always_yields_valid_boxes(
            b in arb_box(),
            code in 0usize..8,
            alpha in 0.05..0.5f64,
        ) {
            let action = Action::from_code(code).unwrap();
            let next = apply_action(&b, action, alpha).unwrap();
            prop_assert!(next.is_valid(), "invalid box {:?} from {:?} {:?}", next, b, action);
        }

        #[test]
        fn unchanged_box_has_zero_step_reward(b in arb_box(), g in arb_box()) {
            prop_assert_eq!(step_reward(&b, &b, &g), 0.0);
        }

        #[test]
        fn history_sum_matches_length(codes in proptest::collection::vec(0usize..9, 0..25)) {
            let mut h = ActionHistory::new();
            for c in &codes {
                h.push(Action::from_code(*c).unwrap());
            }
            let enc = encode_history(&h);
            prop_assert_eq!(enc.iter().sum::<f64>() as usize, codes.len().min(HISTORY_LEN));
        }
    }
}

use rand::Rng;

use super::Maneuver;

pub const LEFT_TEMPLATES: &[&str] = &[
    "turn left at the next intersection",
    "take the next left",
    "make a left turn here",
    "go left at the corner",
    "turn left",
    "bear left onto the side road",
    "hang a left up ahead",
    "please turn left when the road bends",
];

pub const RIGHT_TEMPLATES: &[&str] = &[
    "turn right at the next intersection",
    "take the next right",
    "make a right turn here",
    "go right at the corner",
    "turn right",
    "bear right onto the side road",
    "hang a right up ahead",
    "please turn right when the road bends",
];

pub const STRAIGHT_TEMPLATES: &[&str] = &[
    "go straight",
    "keep going straight ahead",
    "continue straight through the intersection",
    "stay in this lane and drive straight",
    "head straight on",
    "drive straight down this road",
    "keep straight at the junction",
];

/// Most stop phrasings are short hard-stop cues; the last two carry a
/// conflicting verb or a stop-related noun phrase.
pub const STOP_TEMPLATES: &[&str] = &[
    "stop",
    "please stop here",
    "stop now",
    "halt",
    "brake and hold here",
    "pull over here",
    "stop the car",
    "stop after you pass the truck",
    "wait at the stop sign until the road is clear",
];

/// Maneuver-neutral phrasings.
pub const FILLER_TEMPLATES: &[&str] = &[
    "continue as appropriate",
    "drive safely",
    "proceed as usual",
    "keep an eye on the traffic",
    "do whatever is appropriate",
    "carry on",
];

pub fn templates_for(maneuver: Maneuver) -> &'static [&'static str] {
    match maneuver {
        Maneuver::Left => LEFT_TEMPLATES,
        Maneuver::Right => RIGHT_TEMPLATES,
        Maneuver::Straight => STRAIGHT_TEMPLATES,
        Maneuver::Stop => STOP_TEMPLATES,
    }
}

/// Samples a maneuver-specific instruction.
pub fn instruction_for<R: Rng + ?Sized>(maneuver: Maneuver, rng: &mut R) -> String {
    let set = templates_for(maneuver);
    set[rng.random_range(0..set.len())].to_string()
}

pub fn filler_instruction<R: Rng + ?Sized>(rng: &mut R) -> String {
    FILLER_TEMPLATES[rng.random_range(0..FILLER_TEMPLATES.len())].to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const HARD_STOP: &[&str] = &["stop", "halt", "brake", "pull over"];

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn at_least_six_templates_each() {
        for m in [Maneuver::Left, Maneuver::Right, Maneuver::Straight, Maneuver::Stop] {
            assert!(templates_for(m).len() >= 6, "{m:?}");
        }
        assert!(FILLER_TEMPLATES.len() >= 6);
    }

    #[test]
    fn stop_draws_are_short_hard_stop_cues_most_of_the_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 2000;
        let hits = (0..n)
            .filter(|_| {
                let s = instruction_for(Maneuver::Stop, &mut rng);
                HARD_STOP.iter().any(|c| s.contains(c)) && words(&s).len() <= 12
            })
            .count();
        assert!(hits as f64 / n as f64 >= 0.5, "{hits}/{n}");
    }

    #[test]
    fn left_draws_come_from_left_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let s = instruction_for(Maneuver::Left, &mut rng);
            assert!(LEFT_TEMPLATES.contains(&s.as_str()));
        }
    }

    #[test]
    fn filler_is_maneuver_neutral() {
        let cues = ["left", "right", "straight", "stop", "halt", "brake", "pull"];
        for f in FILLER_TEMPLATES {
            assert!(words(f).iter().all(|w| !cues.contains(w)), "{f}");
        }
    }

    #[test]
    fn templates_never_contain_digits() {
        let all = [LEFT_TEMPLATES, RIGHT_TEMPLATES, STRAIGHT_TEMPLATES, STOP_TEMPLATES, FILLER_TEMPLATES];
        for t in all.iter().flat_map(|s| s.iter()) {
            assert!(!t.chars().any(|c| c.is_ascii_digit()), "{t}");
        }
    }

    #[test]
    fn non_stop_templates_have_no_hard_stop_cue() {
        for t in LEFT_TEMPLATES.iter().chain(RIGHT_TEMPLATES).chain(STRAIGHT_TEMPLATES) {
            assert!(HARD_STOP.iter().all(|c| !t.contains(c)), "{t}");
        }
    }
}

use crate::error::{Error, Result};

/// Pose channels driven by the default lexicon; the last one is the speed trace.
pub const POSE_CHANNELS: usize = 12;
pub const SPEED_CHANNEL: usize = 11;
pub const REST: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActionKind {
    Directional,
    Symmetric,
    Static,
}

impl ActionKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Directional => "directional",
            Self::Symmetric => "symmetric",
            Self::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "directional" => Ok(Self::Directional),
            "symmetric" => Ok(Self::Symmetric),
            "static" => Ok(Self::Static),
            other => Err(Error::Unknown {
                kind: "action kind",
                name: other.into(),
            }),
        }
    }
}

/// Closed-form pose path of one action over normalized clip time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Trajectory {
    /// Linear from `start` to `end` on one channel.
    Ramp { channel: usize, start: f64, end: f64 },
    /// `REST + 0.5 cos(2π k (t + ½) / N)`, which reads the same backwards.
    Oscillate { channel: usize, cycles: usize },
    Hold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEntry {
    pub id: usize,
    pub name: String,
    pub antonym: Option<usize>,
    pub kind: ActionKind,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionLexicon {
    entries: Vec<ActionEntry>,
}

const PAIRS: [(&str, &str, usize); 10] = [
    ("fall", "rise", 0),
    ("grow", "shrink", 1),
    ("approach", "recede", 2),
    ("open", "close", 3),
    ("push-left", "push-right", 4),
    ("fill", "empty", 5),
    ("attach", "detach", 6),
    ("enter", "exit", 7),
    ("lift", "lower", 8),
    ("spin-cw", "spin-ccw", 9),
];

// Which end of the channel each pair's first verb starts from.
const FIRST_STARTS_HIGH: [bool; 10] = [true, false, true, false, true, false, true, false, false, false];

const SYMMETRIC: [(&str, usize, usize); 4] = [
    ("shake", 4, 2),
    ("wiggle", 10, 2),
    ("rotate-oscillate", 9, 1),
    ("bounce-in-place", 0, 2),
];

const STATIC: [&str; 2] = ["hold", "rest"];

impl Default for ActionLexicon {
    fn default() -> Self {
        let mut entries = Vec::new();
        for ((a, b, channel), high) in PAIRS.iter().zip(FIRST_STARTS_HIGH) {
            let id = entries.len();
            let (s, e) = if high { (1.0, 0.0) } else { (0.0, 1.0) };
            entries.push(ActionEntry {
                id,
                name: (*a).into(),
                antonym: Some(id + 1),
                kind: ActionKind::Directional,
                trajectory: Trajectory::Ramp {
                    channel: *channel,
                    start: s,
                    end: e,
                },
            });
            entries.push(ActionEntry {
                id: id + 1,
                name: (*b).into(),
                antonym: Some(id),
                kind: ActionKind::Directional,
                trajectory: Trajectory::Ramp {
                    channel: *channel,
                    start: e,
                    end: s,
                },
            });
        }
        for (name, channel, cycles) in SYMMETRIC {
            entries.push(ActionEntry {
                id: entries.len(),
                name: name.into(),
                antonym: None,
                kind: ActionKind::Symmetric,
                trajectory: Trajectory::Oscillate { channel, cycles },
            });
        }
        for name in STATIC {
            entries.push(ActionEntry {
                id: entries.len(),
                name: name.into(),
                antonym: None,
                kind: ActionKind::Static,
                trajectory: Trajectory::Hold,
            });
        }
        Self { entries }
    }
}

impl ActionLexicon {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ActionEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Result<&ActionEntry> {
        self.entries.get(id).ok_or_else(|| Error::Unknown {
            kind: "action id",
            name: id.to_string(),
        })
    }

    pub fn by_name(&self, name: &str) -> Result<&ActionEntry> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Unknown {
                kind: "action",
                name: name.into(),
            })
    }

    pub fn antonym_of(&self, id: usize) -> Result<Option<usize>> {
        Ok(self.get(id)?.antonym)
    }

    /// Pair index shared by an action and its antonym; other kinds get their own.
    pub fn pair_of(&self, id: usize) -> usize {
        match self.entries[id].antonym {
            Some(a) => id.min(a),
            None => id,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_lexicon_shape() {
        let lex = ActionLexicon::default();
        assert_eq!(lex.len(), 26);
        let count = |k| lex.entries().iter().filter(|e| e.kind == k).count();
        assert_eq!(count(ActionKind::Directional), 20);
        assert_eq!(count(ActionKind::Symmetric), 4);
        assert_eq!(count(ActionKind::Static), 2);
    }

    #[test]
    fn antonymy_is_an_involution() {
        let lex = ActionLexicon::default();
        for e in lex.entries() {
            match e.kind {
                ActionKind::Directional => {
                    let a = e.antonym.expect("directional has antonym");
                    assert_eq!(lex.antonym_of(a).unwrap(), Some(e.id));
                    let (Trajectory::Ramp { channel, start, end }, Trajectory::Ramp { channel: c2, start: s2, end: e2 }) =
                        (e.trajectory, lex.get(a).unwrap().trajectory)
                    else {
                        panic!("directional actions ramp");
                    };
                    assert_eq!((channel, start, end), (c2, e2, s2));
                }
                _ => assert_eq!(e.antonym, None),
            }
        }
    }

    #[test]
    fn antonym_examples() {
        let lex = ActionLexicon::default();
        let fall = lex.by_name("fall").unwrap().id;
        let rise = lex.antonym_of(fall).unwrap().unwrap();
        assert_eq!(lex.get(rise).unwrap().name, "rise");
        assert_eq!(lex.antonym_of(rise).unwrap(), Some(fall));
        let shake = lex.by_name("shake").unwrap().id;
        assert_eq!(lex.antonym_of(shake).unwrap(), None);
        assert!(lex.antonym_of(99).is_err());
    }
}

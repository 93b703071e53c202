use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::ScenePair;

/// Which `pc1` attribute an attack perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Positions,
    Colors,
}

/// Perturbed domain and 0-based axes within it (x/y/z or r/g/b).
///
/// Parsed from and written as `all-dims`, `dim=i[,j]`, `all-channels` or
/// `channel=i[,j]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TargetMask {
    pub domain: Domain,
    pub axes: [bool; 3],
}

impl Default for TargetMask {
    fn default() -> Self {
        TargetMask::all(Domain::Positions)
    }
}

impl TargetMask {
    pub fn all(domain: Domain) -> Self {
        TargetMask {
            domain,
            axes: [true; 3],
        }
    }

    pub fn axis(domain: Domain, axis: usize) -> Result<Self> {
        if axis > 2 {
            return Err(Error::Parse(format!("axis {axis} out of range 0..=2")));
        }
        let mut axes = [false; 3];
        axes[axis] = true;
        Ok(TargetMask { domain, axes })
    }

    pub fn is_all(&self) -> bool {
        self.axes == [true; 3]
    }

    /// Checks that the mask selects something the pair actually has.
    pub fn check(&self, pair: &ScenePair) -> Result<()> {
        if !self.axes.iter().any(|a| *a) {
            return Err(Error::Validation("target mask selects no axis".into()));
        }
        if self.domain == Domain::Colors && !pair.has_colors() {
            return Err(Error::Validation(format!(
                "mask '{self}' targets colors but pair '{}' has none",
                pair.id
            )));
        }
        Ok(())
    }
}

impl FromStr for TargetMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parse(format!("invalid target '{s}'"));
        match s {
            "all-dims" => return Ok(TargetMask::all(Domain::Positions)),
            "all-channels" => return Ok(TargetMask::all(Domain::Colors)),
            _ => {}
        }
        let (key, list) = s.split_once('=').ok_or_else(bad)?;
        let domain = match key {
            "dim" => Domain::Positions,
            "channel" => Domain::Colors,
            _ => return Err(bad()),
        };
        let mut axes = [false; 3];
        for item in list.split(',') {
            let i: usize = item.trim().parse().map_err(|_| bad())?;
            if i > 2 {
                return Err(Error::Parse(format!("index {i} out of range 0..=2 in '{s}'")));
            }
            axes[i] = true;
        }
        Ok(TargetMask { domain, axes })
    }
}

impl fmt::Display for TargetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (all, key) = match self.domain {
            Domain::Positions => ("all-dims", "dim"),
            Domain::Colors => ("all-channels", "channel"),
        };
        if self.is_all() {
            return f.write_str(all);
        }
        let list: Vec<String> = (0..3).filter(|&i| self.axes[i]).map(|i| i.to_string()).collect();
        write!(f, "{key}={}", list.join(","))
    }
}

impl TryFrom<String> for TargetMask {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TargetMask> for String {
    fn from(m: TargetMask) -> String {
        m.to_string()
    }
}

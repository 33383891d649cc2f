use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AcrError, Result};
use crate::geometry::PixelPoint;

/// Stable identity of a scene point across observations.
pub type TrackId = u32;

/// One matched point pair between image A (reference side) and image B.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub a: PixelPoint,
    pub b: PixelPoint,
    pub plane_label: Option<u32>,
    pub track: Option<TrackId>,
}

impl Correspondence {
    pub fn new(a: PixelPoint, b: PixelPoint) -> Self {
        Correspondence {
            a,
            b,
            plane_label: None,
            track: None,
        }
    }
}

/// Matched pixel pairs between two images.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CorrespondenceSet {
    items: Vec<Correspondence>,
}

impl CorrespondenceSet {
    pub fn new(items: Vec<Correspondence>) -> Result<Self> {
        if let Some(bad) = items
            .iter()
            .position(|c| !c.a.is_finite() || !c.b.is_finite())
        {
            return Err(AcrError::InvalidInput(format!(
                "correspondence {bad} has non-finite coordinates"
            )));
        }
        Ok(CorrespondenceSet { items })
    }

    pub fn from_pairs(pairs: &[(PixelPoint, PixelPoint)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(a, b)| Correspondence::new(a, b))
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[Correspondence] {
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Correspondence> {
        self.items.iter()
    }

    pub fn get(&self, i: usize) -> Option<&Correspondence> {
        self.items.get(i)
    }

    pub fn push(&mut self, c: Correspondence) {
        self.items.push(c);
    }

    pub fn points_a(&self) -> Vec<PixelPoint> {
        self.items.iter().map(|c| c.a).collect()
    }

    pub fn points_b(&self) -> Vec<PixelPoint> {
        self.items.iter().map(|c| c.b).collect()
    }

    /// Keeps the listed entries, in the given order.
    pub fn subset(&self, indices: &[usize]) -> CorrespondenceSet {
        CorrespondenceSet {
            items: indices.iter().map(|&i| self.items[i]).collect(),
        }
    }

    /// Pairs the B-side points of `self` and `other` through shared track ids.
    ///
    /// Both sets must be observations against the same reference image; the
    /// result relates `self`'s current image (new A side) to `other`'s (new B
    /// side). Entries without a track id are skipped.
    pub fn chain_through_tracks(&self, other: &CorrespondenceSet) -> CorrespondenceSet {
        let by_track: HashMap<TrackId, &Correspondence> = other
            .items
            .iter()
            .filter_map(|c| c.track.map(|t| (t, c)))
            .collect();
        let items = self
            .items
            .iter()
            .filter_map(|c| {
                let t = c.track?;
                let o = by_track.get(&t)?;
                Some(Correspondence {
                    a: c.b,
                    b: o.b,
                    plane_label: c.plane_label,
                    track: Some(t),
                })
            })
            .collect();
        CorrespondenceSet { items }
    }

    pub fn to_file(&self) -> CorrespondenceFile {
        let has_tracks = self.items.iter().any(|c| c.track.is_some());
        CorrespondenceFile {
            pairs: self
                .items
                .iter()
                .map(|c| [c.a.u, c.a.v, c.b.u, c.b.v])
                .collect(),
            plane_label: self
                .items
                .iter()
                .map(|c| c.plane_label.map(i64::from))
                .collect(),
            track_id: has_tracks.then(|| self.items.iter().map(|c| c.track).collect()),
        }
    }

    pub fn from_file(file: CorrespondenceFile) -> Result<Self> {
        let n = file.pairs.len();
        if !file.plane_label.is_empty() && file.plane_label.len() != n {
            return Err(AcrError::InvalidInput(format!(
                "plane_label has {} entries for {n} pairs",
                file.plane_label.len()
            )));
        }
        if let Some(t) = &file.track_id {
            if t.len() != n {
                return Err(AcrError::InvalidInput(format!(
                    "track_id has {} entries for {n} pairs",
                    t.len()
                )));
            }
        }
        let mut items = Vec::with_capacity(n);
        for (i, p) in file.pairs.iter().enumerate() {
            let label = match file.plane_label.get(i).copied().flatten() {
                Some(l) if l < 0 || l > u32::MAX as i64 => {
                    return Err(AcrError::InvalidInput(format!(
                        "plane label {l} out of range"
                    )))
                }
                Some(l) => Some(l as u32),
                None => None,
            };
            items.push(Correspondence {
                a: PixelPoint::new(p[0], p[1]),
                b: PixelPoint::new(p[2], p[3]),
                plane_label: label,
                track: file.track_id.as_ref().and_then(|t| t[i]),
            });
        }
        CorrespondenceSet::new(items)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AcrError::MissingInput(format!("{}: {e}", path.display())))?;
        Self::from_file(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_file())?)?;
        Ok(())
    }
}

impl<'a> IntoIterator for &'a CorrespondenceSet {
    type Item = &'a Correspondence;
    type IntoIter = std::slice::Iter<'a, Correspondence>;

    fn into_iter(self) -> Self::IntoIter {
        self.items.iter()
    }
}

/// On-disk layout: `{"pairs": [[uA,vA,uB,vB], …], "plane_label": [int|null, …]}`,
/// with an optional parallel `"track_id"` array.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrespondenceFile {
    pub pairs: Vec<[f64; 4]>,
    #[serde(default)]
    pub plane_label: Vec<Option<i64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<Vec<Option<TrackId>>>,
}

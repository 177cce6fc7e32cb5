//! Geometric primitives shared by every stage: boxes, layout classes,
//! detections and text cells.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in page pixels, origin top-left, y pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct BBox {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

impl BBox {
    pub fn new(left: f64, top: f64, right: f64, bottom: f64) -> Result<Self> {
        let b = BBox {
            left,
            top,
            right,
            bottom,
        };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from COCO `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if w < 0.0 || h < 0.0 {
            return Err(Error::InvalidBox {
                left: x,
                top: y,
                right: x + w,
                bottom: y + h,
                reason: "negative width or height",
            });
        }
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.left, self.top, self.width(), self.height()]
    }

    pub fn validate(&self) -> Result<()> {
        let reason = if ![self.left, self.top, self.right, self.bottom]
            .iter()
            .all(|v| v.is_finite())
        {
            "non-finite coordinate"
        } else if self.left > self.right {
            "left exceeds right"
        } else if self.top > self.bottom {
            "top exceeds bottom"
        } else {
            return Ok(());
        };
        Err(Error::InvalidBox {
            left: self.left,
            top: self.top,
            right: self.right,
            bottom: self.bottom,
            reason,
        })
    }

    #[inline]
    pub fn width(&self) -> f64 {
        self.right - self.left
    }

    #[inline]
    pub fn height(&self) -> f64 {
        self.bottom - self.top
    }

    #[inline]
    pub fn area(&self) -> f64 {
        area(self)
    }

    /// Grows the box by `margin` on every side.
    pub fn expand(&self, margin: f64) -> BBox {
        BBox {
            left: self.left - margin,
            top: self.top - margin,
            right: self.right + margin,
            bottom: self.bottom + margin,
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.right.min(other.right) - self.left.max(other.left);
        let h = self.bottom.min(other.bottom) - self.top.max(other.top);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Edge coordinate by side.
    #[inline]
    pub fn edge(&self, side: Side) -> f64 {
        match side {
            Side::Left => self.left,
            Side::Top => self.top,
            Side::Right => self.right,
            Side::Bottom => self.bottom,
        }
    }

    #[inline]
    pub fn set_edge(&mut self, side: Side, value: f64) {
        match side {
            Side::Left => self.left = value,
            Side::Top => self.top = value,
            Side::Right => self.right = value,
            Side::Bottom => self.bottom = value,
        }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.left, b.top, b.right, b.bottom]
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}]",
            self.left, self.top, self.right, self.bottom
        )
    }
}

/// One of the four box edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Top,
    Right,
    Bottom,
}

impl Side {
    pub const ALL: [Side; 4] = [Side::Left, Side::Top, Side::Right, Side::Bottom];

    /// Index into `[left, top, right, bottom]`.
    pub fn index(self) -> usize {
        self as usize
    }

    /// True for the sides whose coordinate grows when the box grows (right, bottom).
    pub fn is_far(self) -> bool {
        matches!(self, Side::Right | Side::Bottom)
    }
}

pub fn area(b: &BBox) -> f64 {
    b.width() * b.height()
}

/// Intersection over union together with a flag for the degenerate case.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iou {
    pub value: f64,
    /// Set when the union has zero area; `value` is then 0.
    pub degenerate: bool,
}

pub fn iou_checked(a: &BBox, b: &BBox) -> Iou {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return Iou {
            value: 0.0,
            degenerate: true,
        };
    }
    Iou {
        value: (inter / union).clamp(0.0, 1.0),
        degenerate: false,
    }
}

#[inline]
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_checked(a, b).value
}

/// True iff every edge of `inner` lies inside `outer` or overshoots it by at most `tolerance`.
pub fn contains(outer: &BBox, inner: &BBox, tolerance: f64) -> bool {
    inner.left >= outer.left - tolerance
        && inner.top >= outer.top - tolerance
        && inner.right <= outer.right + tolerance
        && inner.bottom <= outer.bottom + tolerance
}

/// Smallest box containing every input box.
pub fn envelope<'a, I>(boxes: I) -> Result<BBox>
where
    I: IntoIterator<Item = &'a BBox>,
{
    let mut it = boxes.into_iter();
    let first = *it.next().ok_or(Error::EmptyEnvelope)?;
    Ok(it.fold(first, |acc, b| BBox {
        left: acc.left.min(b.left),
        top: acc.top.min(b.top),
        right: acc.right.max(b.right),
        bottom: acc.bottom.max(b.bottom),
    }))
}

/// The eleven layout element classes, with their conventional ids 1..=11.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LayoutCategory {
    Caption = 1,
    Footnote = 2,
    Formula = 3,
    #[serde(rename = "List-item")]
    ListItem = 4,
    #[serde(rename = "Page-footer")]
    PageFooter = 5,
    #[serde(rename = "Page-header")]
    PageHeader = 6,
    Picture = 7,
    #[serde(rename = "Section-header")]
    SectionHeader = 8,
    Table = 9,
    Text = 10,
    Title = 11,
}

impl LayoutCategory {
    pub const ALL: [LayoutCategory; 11] = [
        LayoutCategory::Caption,
        LayoutCategory::Footnote,
        LayoutCategory::Formula,
        LayoutCategory::ListItem,
        LayoutCategory::PageFooter,
        LayoutCategory::PageHeader,
        LayoutCategory::Picture,
        LayoutCategory::SectionHeader,
        LayoutCategory::Table,
        LayoutCategory::Text,
        LayoutCategory::Title,
    ];

    pub fn id(self) -> u64 {
        self as u64
    }

    pub fn from_id(id: u64) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.id() == id)
    }

    pub fn name(self) -> &'static str {
        match self {
            LayoutCategory::Caption => "Caption",
            LayoutCategory::Footnote => "Footnote",
            LayoutCategory::Formula => "Formula",
            LayoutCategory::ListItem => "List-item",
            LayoutCategory::PageFooter => "Page-footer",
            LayoutCategory::PageHeader => "Page-header",
            LayoutCategory::Picture => "Picture",
            LayoutCategory::SectionHeader => "Section-header",
            LayoutCategory::Table => "Table",
            LayoutCategory::Text => "Text",
            LayoutCategory::Title => "Title",
        }
    }

    /// Accepts the canonical names and the common `list_item` / `List item` spellings.
    pub fn from_name(name: &str) -> Option<Self> {
        let norm = |s: &str| {
            s.chars()
                .filter(|c| c.is_ascii_alphanumeric())
                .collect::<String>()
                .to_ascii_lowercase()
        };
        let wanted = norm(name);
        Self::ALL.iter().copied().find(|c| norm(c.name()) == wanted)
    }
}

impl fmt::Display for LayoutCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Bidirectional mapping between file-level category ids and [`LayoutCategory`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMap {
    by_id: BTreeMap<u64, LayoutCategory>,
}

impl Default for CategoryMap {
    fn default() -> Self {
        CategoryMap {
            by_id: LayoutCategory::ALL.iter().map(|c| (c.id(), *c)).collect(),
        }
    }
}

impl CategoryMap {
    /// Builds a map from `(id, name)` pairs; every name must be a known class.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, &'a str)>,
    {
        let mut by_id = BTreeMap::new();
        for (id, name) in pairs {
            let cat = LayoutCategory::from_name(name)
                .ok_or_else(|| Error::UnknownCategoryName(name.to_string()))?;
            if by_id.values().any(|c| *c == cat) {
                return Err(Error::Config(format!("category {name:?} listed twice")));
            }
            by_id.insert(id, cat);
        }
        Ok(CategoryMap { by_id })
    }

    pub fn category(&self, id: u64) -> Result<LayoutCategory> {
        self.by_id
            .get(&id)
            .copied()
            .ok_or(Error::UnknownCategoryId(id))
    }

    pub fn id_of(&self, cat: LayoutCategory) -> Option<u64> {
        self.by_id
            .iter()
            .find_map(|(id, c)| (*c == cat).then_some(*id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, LayoutCategory)> + '_ {
        self.by_id.iter().map(|(id, c)| (*id, *c))
    }
}

/// Opaque page key. COCO integer image ids are carried as their decimal string.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PageId(pub String);

impl PageId {
    pub fn new(s: impl Into<String>) -> Self {
        PageId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Numeric COCO id, if the key is one.
    pub fn as_coco_id(&self) -> Option<u64> {
        self.0.parse().ok()
    }
}

impl From<u64> for PageId {
    fn from(id: u64) -> Self {
        PageId(id.to_string())
    }
}

impl From<&str> for PageId {
    fn from(s: &str) -> Self {
        PageId(s.to_string())
    }
}

impl fmt::Display for PageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// A scored, categorised box produced by a detector (or by fusion).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub page_id: PageId,
    pub bbox: BBox,
    pub category: LayoutCategory,
    pub score: f64,
}

impl Detection {
    pub fn new(page_id: impl Into<PageId>, bbox: BBox, category: LayoutCategory, score: f64) -> Self {
        Detection {
            page_id: page_id.into(),
            bbox,
            category,
            score,
        }
    }
}

/// A text-only rectangle extracted from the source PDF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextCell {
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl TextCell {
    pub fn new(bbox: BBox) -> Self {
        TextCell { bbox, text: None }
    }
}

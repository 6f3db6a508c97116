//! Labeled token spans: system text, one image, the question, and the
//! generated continuation.

use serde::{Deserialize, Serialize};

use crate::error::{CmgError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpanRole {
    System,
    Image,
    Question,
    Generated,
}

impl SpanRole {
    pub const ALL: [SpanRole; 4] = [
        SpanRole::System,
        SpanRole::Image,
        SpanRole::Question,
        SpanRole::Generated,
    ];

    pub fn index(self) -> usize {
        match self {
            SpanRole::System => 0,
            SpanRole::Image => 1,
            SpanRole::Question => 2,
            SpanRole::Generated => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SpanRole::System => "system",
            SpanRole::Image => "image",
            SpanRole::Question => "question",
            SpanRole::Generated => "generated",
        }
    }

    pub fn is_text(self) -> bool {
        self != SpanRole::Image
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub role: SpanRole,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }

    pub fn contains(&self, pos: usize) -> bool {
        pos >= self.start && pos < self.end()
    }
}

/// Ordered spans covering a token sequence.
///
/// Always system → image → question → generated. Spans may be empty; the
/// generated span grows during decoding.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "LayoutRepr", into = "LayoutRepr")]
pub struct ModalityLayout {
    spans: [Span; 4],
}

#[derive(Serialize, Deserialize)]
struct LayoutRepr {
    spans: Vec<Span>,
}

impl TryFrom<LayoutRepr> for ModalityLayout {
    type Error = CmgError;

    fn try_from(repr: LayoutRepr) -> Result<Self> {
        Self::from_spans(&repr.spans)
    }
}

impl From<ModalityLayout> for LayoutRepr {
    fn from(layout: ModalityLayout) -> Self {
        LayoutRepr {
            spans: layout.spans.to_vec(),
        }
    }
}

impl ModalityLayout {
    pub fn new(system: usize, image: usize, question: usize) -> Self {
        let mut start = 0;
        let spans = [system, image, question, 0]
            .into_iter()
            .zip(SpanRole::ALL)
            .map(|(len, role)| {
                let span = Span { role, start, len };
                start += len;
                span
            })
            .collect::<Vec<_>>();
        Self {
            spans: spans.try_into().expect("four spans"),
        }
    }

    /// Rebuilds a layout from explicit spans, checking order, contiguity and
    /// that the generated span is last.
    pub fn from_spans(spans: &[Span]) -> Result<Self> {
        if spans.len() != 4 {
            return Err(CmgError::InvalidLayout(format!(
                "expected 4 spans (system, image, question, generated), got {}",
                spans.len()
            )));
        }
        let mut expected_start = 0;
        for (span, role) in spans.iter().zip(SpanRole::ALL) {
            if span.role != role {
                return Err(CmgError::InvalidLayout(format!(
                    "span {:?} found where {:?} was expected",
                    span.role, role
                )));
            }
            if span.start != expected_start {
                return Err(CmgError::InvalidLayout(format!(
                    "{} span starts at {}, expected {}",
                    role.name(),
                    span.start,
                    expected_start
                )));
            }
            expected_start = span
                .start
                .checked_add(span.len)
                .ok_or_else(|| CmgError::InvalidLayout("span overflow".into()))?;
        }
        Ok(Self {
            spans: [spans[0], spans[1], spans[2], spans[3]],
        })
    }

    pub fn spans(&self) -> &[Span; 4] {
        &self.spans
    }

    pub fn span(&self, role: SpanRole) -> Span {
        self.spans[role.index()]
    }

    pub fn image(&self) -> Span {
        self.span(SpanRole::Image)
    }

    /// Number of tokens covered, including generated ones.
    pub fn len(&self) -> usize {
        self.spans[3].end()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn prompt_len(&self) -> usize {
        self.spans[3].start
    }

    pub fn generated_len(&self) -> usize {
        self.spans[3].len
    }

    pub fn role_of(&self, pos: usize) -> Option<SpanRole> {
        self.spans.iter().find(|s| s.contains(pos)).map(|s| s.role)
    }

    pub fn is_image(&self, pos: usize) -> bool {
        self.image().contains(pos)
    }

    pub fn push_generated(&mut self) {
        self.spans[3].len += 1;
    }

    pub fn with_generated(&self, generated: usize) -> Self {
        let mut out = self.clone();
        out.spans[3].len = generated;
        out
    }

    pub fn check_token_count(&self, n: usize) -> Result<()> {
        if self.len() != n {
            return Err(CmgError::InvalidLayout(format!(
                "layout covers {} positions but {} tokens were given",
                self.len(),
                n
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_are_contiguous() {
        let mut layout = ModalityLayout::new(2, 16, 3);
        assert_eq!(layout.len(), 21);
        assert_eq!(layout.role_of(0), Some(SpanRole::System));
        assert_eq!(layout.role_of(2), Some(SpanRole::Image));
        assert_eq!(layout.role_of(18), Some(SpanRole::Question));
        assert_eq!(layout.role_of(21), None);
        layout.push_generated();
        assert_eq!(layout.role_of(21), Some(SpanRole::Generated));
        assert_eq!(layout.prompt_len(), 21);
    }

    #[test]
    fn rejects_gaps_and_misordered_spans() {
        let good = ModalityLayout::new(1, 4, 2);
        let mut spans = good.spans().to_vec();
        spans[2].start += 1;
        assert!(ModalityLayout::from_spans(&spans).is_err());
        let mut spans = good.spans().to_vec();
        spans.swap(0, 1);
        assert!(ModalityLayout::from_spans(&spans).is_err());
        assert!(ModalityLayout::from_spans(&good.spans()[..3]).is_err());
    }

    #[test]
    fn json_round_trip_validates() {
        let layout = ModalityLayout::new(1, 4, 2).with_generated(3);
        let json = serde_json::to_string(&layout).unwrap();
        let back: ModalityLayout = serde_json::from_str(&json).unwrap();
        assert_eq!(back, layout);
        let bad = json.replace("\"start\":5", "\"start\":6");
        assert!(serde_json::from_str::<ModalityLayout>(&bad).is_err());
    }
}

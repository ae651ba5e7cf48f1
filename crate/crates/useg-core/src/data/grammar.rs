//! Caption grammar over four attribute vocabularies.
//!
//! Captions follow the fixed template
//! `"<size> <attenuation> <type> in the <location>"` and parse back to
//! the attribute tuple that produced them, so a caption is exactly as
//! informative as its tuple.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SizeClass {
    Small,
    Large,
}

impl SizeClass {
    pub const ALL: [SizeClass; 2] = [SizeClass::Small, SizeClass::Large];

    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Attenuation {
    Hypo,
    Hyper,
    Enhancing,
}

impl Attenuation {
    pub const ALL: [Attenuation; 3] = [
        Attenuation::Hypo,
        Attenuation::Hyper,
        Attenuation::Enhancing,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Attenuation::Hypo => "hypoattenuating",
            Attenuation::Hyper => "hyperattenuating",
            Attenuation::Enhancing => "enhancing",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LesionKind {
    Nodule,
    Mass,
    LymphNode,
}

impl LesionKind {
    pub const ALL: [LesionKind; 3] = [LesionKind::Nodule, LesionKind::Mass, LesionKind::LymphNode];

    pub fn word(self) -> &'static str {
        match self {
            LesionKind::Nodule => "nodule",
            LesionKind::Mass => "mass",
            LesionKind::LymphNode => "lymph node",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Location {
    UpperLeft,
    UpperRight,
    LowerLeft,
    LowerRight,
    Center,
}

impl Location {
    pub const ALL: [Location; 5] = [
        Location::UpperLeft,
        Location::UpperRight,
        Location::LowerLeft,
        Location::LowerRight,
        Location::Center,
    ];

    pub fn word(self) -> &'static str {
        match self {
            Location::UpperLeft => "upper left",
            Location::UpperRight => "upper right",
            Location::LowerLeft => "lower left",
            Location::LowerRight => "lower right",
            Location::Center => "center",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributeTuple {
    pub size: SizeClass,
    pub attenuation: Attenuation,
    pub kind: LesionKind,
    pub location: Location,
}

impl AttributeTuple {
    /// Number of attribute slots where the two tuples disagree.
    pub fn differs_in(&self, other: &AttributeTuple) -> usize {
        (self.size != other.size) as usize
            + (self.attenuation != other.attenuation) as usize
            + (self.kind != other.kind) as usize
            + (self.location != other.location) as usize
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CaptionGrammar;

impl CaptionGrammar {
    pub const VERSION: &'static str = "v1";

    pub fn render(&self, attrs: &AttributeTuple) -> String {
        format!(
            "{} {} {} in the {}",
            attrs.size.word(),
            attrs.attenuation.word(),
            attrs.kind.word(),
            attrs.location.word()
        )
    }

    /// Inverse of `render`; anything off-template is `None`.
    pub fn parse(&self, caption: &str) -> Option<AttributeTuple> {
        let rest = caption.trim();
        let (size, rest) = Self::strip_word(rest, &SizeClass::ALL, SizeClass::word)?;
        let (attenuation, rest) = Self::strip_word(rest, &Attenuation::ALL, Attenuation::word)?;
        let (kind_part, loc_part) = rest.split_once(" in the ")?;
        let kind = *LesionKind::ALL.iter().find(|k| k.word() == kind_part)?;
        let location = *Location::ALL.iter().find(|l| l.word() == loc_part)?;
        Some(AttributeTuple {
            size,
            attenuation,
            kind,
            location,
        })
    }

    pub fn all_tuples(&self) -> Vec<AttributeTuple> {
        let mut out = Vec::new();
        for &size in &SizeClass::ALL {
            for &attenuation in &Attenuation::ALL {
                for &kind in &LesionKind::ALL {
                    for &location in &Location::ALL {
                        out.push(AttributeTuple {
                            size,
                            attenuation,
                            kind,
                            location,
                        });
                    }
                }
            }
        }
        out
    }

    fn strip_word<'a, V: Copy>(
        text: &'a str,
        vocab: &[V],
        word: fn(V) -> &'static str,
    ) -> Option<(V, &'a str)> {
        for &v in vocab {
            if let Some(rest) = text.strip_prefix(word(v)) {
                if let Some(rest) = rest.strip_prefix(' ') {
                    return Some((v, rest));
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn every_caption_parses_back_to_a_unique_tuple() {
        let grammar = CaptionGrammar;
        let tuples = grammar.all_tuples();
        assert_eq!(tuples.len(), 2 * 3 * 3 * 5);
        let mut seen = HashSet::new();
        for t in &tuples {
            let caption = grammar.render(t);
            assert!(seen.insert(caption.clone()), "duplicate caption {caption}");
            let parsed = grammar.parse(&caption).expect("caption must parse");
            assert_eq!(parsed, *t, "round-trip failed for {caption}");
        }
    }

    #[test]
    fn multiword_vocabulary_entries_round_trip() {
        let grammar = CaptionGrammar;
        let t = AttributeTuple {
            size: SizeClass::Large,
            attenuation: Attenuation::Hypo,
            kind: LesionKind::LymphNode,
            location: Location::UpperLeft,
        };
        let caption = grammar.render(&t);
        assert_eq!(
            caption,
            "large hypoattenuating lymph node in the upper left"
        );
        assert_eq!(grammar.parse(&caption), Some(t));
    }

    #[test]
    fn off_template_captions_do_not_parse() {
        let grammar = CaptionGrammar;
        for bad in [
            "",
            "small nodule in the center",
            "small hypoattenuating nodule near the center",
            "tiny hypoattenuating nodule in the center",
            "small hypoattenuating nodule in the centre",
            "small hypoattenuating nodule in the center extra",
        ] {
            assert_eq!(grammar.parse(bad), None, "parsed {bad:?}");
        }
    }

    #[test]
    fn differs_in_counts_slots() {
        let grammar = CaptionGrammar;
        let tuples = grammar.all_tuples();
        let a = tuples[0];
        assert_eq!(a.differs_in(&a), 0);
        let mut b = a;
        b.location = Location::LowerRight;
        assert_eq!(a.differs_in(&b), 1);
        b.kind = LesionKind::Mass;
        assert_eq!(a.differs_in(&b), 2);
    }
}

//! Toy image domain: classes defined by a color palette plus a cell pattern.
//!
//! Every class draws colors from its own palette on the codebook lattice and
//! arranges them as solid fill, one-cell stripes or a one-cell checkerboard,
//! where a cell is one tokenizer patch. Because classes are generative rules,
//! the same rules double as an exact oracle for condition scoring and
//! classification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::Condition;
use crate::tokenizer::{Codebook, ImageGrid, Rgb, TokenSequence, TokenizerError};

#[derive(Debug, Error)]
pub enum DomainError {
    #[error("configuration error: {0}")]
    Configuration(String),
    #[error("contract error: {0}")]
    Contract(String),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T> = std::result::Result<T, DomainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
}

impl Pattern {
    pub const ALL: [Pattern; 3] = [Pattern::Solid, Pattern::Stripes, Pattern::Checker];

    pub fn index(self) -> usize {
        match self {
            Pattern::Solid => 0,
            Pattern::Stripes => 1,
            Pattern::Checker => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripes => "striped",
            Pattern::Checker => "checkered",
        }
    }
}

/// Palette colors are lattice level triples, e.g. `[3, 0, 0]` for full red on
/// a 4-level lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    pub palette: Vec<[usize; 3]>,
    pub pattern: Pattern,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSettings {
    /// Image side length in pixels.
    pub grid_size: usize,
    pub patch_size: usize,
    pub codebook_size: usize,
    pub num_classes: usize,
    /// Explicit class definitions; generated from built-in palette families
    /// when absent.
    pub classes: Option<Vec<ClassSpec>>,
}

impl Default for DomainSettings {
    fn default() -> Self {
        Self {
            grid_size: 16,
            patch_size: 2,
            codebook_size: 64,
            num_classes: 2,
            classes: None,
        }
    }
}

/// `(family name, palette builder from top level t and mid level m, minimum levels)`.
type Family = (&'static str, fn(usize, usize) -> Vec<[usize; 3]>, usize);

const FAMILIES: [Family; 6] = [
    ("red", |t, m| vec![[t, 0, 0], [m, 0, 0], [t, 0, 1], [m, 0, 1]], 3),
    ("blue", |t, m| vec![[0, 0, t], [0, 0, m], [0, 1, t], [0, 1, m]], 3),
    ("green", |t, m| vec![[0, t, 0], [0, m, 0], [1, t, 0], [1, m, 0]], 3),
    ("yellow", |t, m| vec![[t, t, 0], [t, m, 0], [m, t, 0], [m, m, 0]], 4),
    ("cyan", |t, m| vec![[0, t, t], [0, m, t], [0, t, m], [0, m, m]], 4),
    ("magenta", |t, m| vec![[t, 0, t], [m, 0, t], [t, 0, m], [m, 0, m]], 4),
];

const PATTERN_CYCLE: [Pattern; 3] = [Pattern::Stripes, Pattern::Checker, Pattern::Solid];

fn default_classes(num_classes: usize, levels: usize) -> Result<Vec<ClassSpec>> {
    if num_classes > FAMILIES.len() {
        return Err(DomainError::Configuration(format!(
            "at most {} built-in classes, requested {num_classes}",
            FAMILIES.len()
        )));
    }
    let (t, m) = (levels - 1, levels - 2);
    FAMILIES[..num_classes]
        .iter()
        .enumerate()
        .map(|(i, (name, build, min_levels))| {
            if levels < *min_levels {
                return Err(DomainError::Configuration(format!(
                    "class family {name} needs a {min_levels}-level lattice, codebook has {levels}"
                )));
            }
            let pattern = PATTERN_CYCLE[i % PATTERN_CYCLE.len()];
            Ok(ClassSpec {
                name: format!("{name} {}", pattern.name()),
                palette: build(t, m),
                pattern,
            })
        })
        .collect()
}

/// Resolved toy domain: codebook plus validated class rules.
#[derive(Debug, Clone)]
pub struct Domain {
    settings: DomainSettings,
    classes: Vec<ClassSpec>,
    palettes: Vec<Vec<Rgb>>,
    codebook: Codebook,
}

const COLOR_TOL: f64 = 1e-9;

fn same_color(a: Rgb, b: Rgb) -> bool {
    a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= COLOR_TOL)
}

/// Per-cell colors, `None` where a cell is not a single uniform color.
struct CellGrid {
    rows: usize,
    cols: usize,
    cells: Vec<Option<Rgb>>,
}

impl CellGrid {
    fn new(image: &ImageGrid, patch: usize) -> Self {
        let (rows, cols) = (image.height() / patch, image.width() / patch);
        let mut cells = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let first = image.pixel(r * patch, c * patch);
                let uniform = (0..patch)
                    .flat_map(|dr| (0..patch).map(move |dc| (dr, dc)))
                    .all(|(dr, dc)| same_color(image.pixel(r * patch + dr, c * patch + dc), first));
                cells.push(uniform.then_some(first));
            }
        }
        Self { rows, cols, cells }
    }

    fn get(&self, r: isize, c: isize) -> Option<Rgb> {
        if r < 0 || c < 0 || r as usize >= self.rows || c as usize >= self.cols {
            return None;
        }
        self.cells[r as usize * self.cols + c as usize]
    }
}

#[derive(Clone, Copy, PartialEq)]
enum Orientation {
    /// Constant along rows.
    Horizontal,
    /// Constant along columns.
    Vertical,
}

fn cell_passes<F: Fn(Rgb) -> bool>(
    grid: &CellGrid,
    r: usize,
    c: usize,
    pattern: Pattern,
    orientation: Orientation,
    considered: &F,
) -> bool {
    let Some(me) = grid.cells[r * grid.cols + c] else {
        return false;
    };
    let (r, c) = (r as isize, c as isize);
    let neighbor = |dr: isize, dc: isize| grid.get(r + dr, c + dc).filter(|n| considered(*n));
    let all_equal = |offsets: &[(isize, isize)]| {
        offsets
            .iter()
            .filter_map(|&(dr, dc)| neighbor(dr, dc))
            .all(|n| same_color(n, me))
    };
    let all_differ = |offsets: &[(isize, isize)]| {
        offsets
            .iter()
            .filter_map(|&(dr, dc)| neighbor(dr, dc))
            .all(|n| !same_color(n, me))
    };
    const ROW: [(isize, isize); 2] = [(0, -1), (0, 1)];
    const COL: [(isize, isize); 2] = [(-1, 0), (1, 0)];
    const DIAG: [(isize, isize); 4] = [(-1, -1), (-1, 1), (1, -1), (1, 1)];
    match pattern {
        Pattern::Solid => all_equal(&ROW) && all_equal(&COL),
        Pattern::Checker => all_differ(&ROW) && all_differ(&COL) && all_equal(&DIAG),
        Pattern::Stripes => match orientation {
            Orientation::Horizontal => all_equal(&ROW) && all_differ(&COL),
            Orientation::Vertical => all_equal(&COL) && all_differ(&ROW),
        },
    }
}

fn stripe_orientation<F: Fn(Rgb) -> bool>(grid: &CellGrid, considered: &F) -> Orientation {
    let (mut along_rows, mut along_cols) = (0usize, 0usize);
    for r in 0..grid.rows as isize {
        for c in 0..grid.cols as isize {
            let Some(me) = grid.get(r, c).filter(|x| considered(*x)) else {
                continue;
            };
            if grid.get(r, c + 1).filter(|x| considered(*x)).is_some_and(|n| same_color(n, me)) {
                along_rows += 1;
            }
            if grid.get(r + 1, c).filter(|x| considered(*x)).is_some_and(|n| same_color(n, me)) {
                along_cols += 1;
            }
        }
    }
    if along_cols > along_rows {
        Orientation::Vertical
    } else {
        Orientation::Horizontal
    }
}

/// A labeled image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub label: usize,
    pub image: ImageGrid,
}

impl Domain {
    pub fn new(settings: DomainSettings) -> Result<Self> {
        if settings.patch_size == 0 || settings.grid_size % settings.patch_size != 0 {
            return Err(DomainError::Configuration(format!(
                "grid size {} is not divisible by patch size {}",
                settings.grid_size, settings.patch_size
            )));
        }
        let codebook = Codebook::build_lattice(settings.codebook_size, settings.patch_size)?;
        let levels = codebook.levels();
        if levels < 3 {
            return Err(DomainError::Configuration(format!(
                "codebook of {} entries gives a {levels}-level lattice; at least 3 levels (K >= 27) are needed",
                settings.codebook_size
            )));
        }
        let classes = match &settings.classes {
            Some(c) => c.clone(),
            None => default_classes(settings.num_classes, levels)?,
        };
        if classes.len() != settings.num_classes {
            return Err(DomainError::Configuration(format!(
                "num_classes is {} but {} classes are defined",
                settings.num_classes,
                classes.len()
            )));
        }
        if classes.is_empty() {
            return Err(DomainError::Configuration("at least one class is required".into()));
        }
        let mut palettes = Vec::with_capacity(classes.len());
        for class in &classes {
            let min_colors = match class.pattern {
                Pattern::Solid => 1,
                _ => 2,
            };
            if class.palette.len() < min_colors {
                return Err(DomainError::Configuration(format!(
                    "class '{}' needs at least {min_colors} palette colors",
                    class.name
                )));
            }
            let mut colors: Vec<Rgb> = Vec::new();
            for levels_rgb in &class.palette {
                if levels_rgb.iter().any(|&l| l >= levels) {
                    return Err(DomainError::Configuration(format!(
                        "class '{}' color {levels_rgb:?} is off the {levels}-level lattice",
                        class.name
                    )));
                }
                let color = levels_rgb.map(|l| codebook.lattice_value(l));
                if colors.iter().any(|c| same_color(*c, color)) {
                    return Err(DomainError::Configuration(format!(
                        "class '{}' repeats color {levels_rgb:?}",
                        class.name
                    )));
                }
                colors.push(color);
            }
            for (other, prev) in palettes.iter().enumerate() {
                let prev: &Vec<Rgb> = prev;
                if colors.iter().any(|c| prev.iter().any(|p| same_color(*c, *p))) {
                    return Err(DomainError::Configuration(format!(
                        "class '{}' shares palette colors with class {other}",
                        class.name
                    )));
                }
            }
            palettes.push(colors);
        }
        Ok(Self {
            settings,
            classes,
            palettes,
            codebook,
        })
    }

    pub fn settings(&self) -> &DomainSettings {
        &self.settings
    }

    pub fn classes(&self) -> &[ClassSpec] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    /// Patch grid side length.
    pub fn cells(&self) -> usize {
        self.settings.grid_size / self.settings.patch_size
    }

    pub fn seq_len(&self) -> usize {
        self.cells() * self.cells()
    }

    /// Text alphabet: one palette word per class, then one word per pattern.
    pub fn text_vocab_size(&self) -> usize {
        self.num_classes() + Pattern::ALL.len()
    }

    pub fn class_text(&self, class: usize) -> Vec<usize> {
        vec![class, self.num_classes() + self.classes[class].pattern.index()]
    }

    /// Natural-language description used when querying a remote judge.
    pub fn describe(&self, condition: &Condition) -> String {
        match condition {
            Condition::Class(c) => match self.classes.get(*c) {
                Some(spec) => format!("a {} image", spec.name),
                None => format!("class {c}"),
            },
            Condition::Text(tokens) => {
                let words: Vec<String> = tokens
                    .iter()
                    .map(|&t| {
                        if t < self.num_classes() {
                            format!("{} colors", self.classes[t].name.split(' ').next().unwrap_or("?"))
                        } else {
                            Pattern::ALL
                                .get(t - self.num_classes())
                                .map_or_else(|| format!("word {t}"), |p| p.name().to_string())
                        }
                    })
                    .collect();
                format!("an image with {}", words.join(", "))
            }
            Condition::Null => String::new(),
        }
    }

    /// Condition for a class label under the given conditioning style.
    pub fn condition_for(&self, class: usize, text: bool) -> Condition {
        if text {
            Condition::Text(self.class_text(class))
        } else {
            Condition::Class(class)
        }
    }

    pub fn decode(&self, tokens: &TokenSequence) -> Result<ImageGrid> {
        let cells = self.cells();
        Ok(self.codebook.decode(tokens, cells, cells)?)
    }

    pub fn encode(&self, image: &ImageGrid) -> Result<TokenSequence> {
        Ok(self.codebook.encode(image)?)
    }

    /// Draws one image from a class's generative rule.
    pub fn sample_class_image<R: Rng>(&self, class: usize, rng: &mut R) -> Result<ImageGrid> {
        let spec = self
            .classes
            .get(class)
            .ok_or_else(|| DomainError::Contract(format!("unknown class {class}")))?;
        let palette = &self.palettes[class];
        let cells = self.cells();
        let mut colors = vec![[0.0; 3]; cells * cells];
        match spec.pattern {
            Pattern::Solid => {
                let c = palette[rng.random_range(0..palette.len())];
                colors.fill(c);
            }
            Pattern::Checker => {
                let a = rng.random_range(0..palette.len());
                let b = (a + 1 + rng.random_range(0..palette.len() - 1)) % palette.len();
                for r in 0..cells {
                    for c in 0..cells {
                        colors[r * cells + c] = if (r + c) % 2 == 0 { palette[a] } else { palette[b] };
                    }
                }
            }
            Pattern::Stripes => {
                let vertical = rng.random_bool(0.5);
                let mut prev: Option<usize> = None;
                for line in 0..cells {
                    let pick = match prev {
                        None => rng.random_range(0..palette.len()),
                        Some(p) => (p + 1 + rng.random_range(0..palette.len() - 1)) % palette.len(),
                    };
                    prev = Some(pick);
                    for k in 0..cells {
                        let (r, c) = if vertical { (k, line) } else { (line, k) };
                        colors[r * cells + c] = palette[pick];
                    }
                }
            }
        }
        let p = self.settings.patch_size;
        let side = self.settings.grid_size;
        let mut pixels = vec![[0.0; 3]; side * side];
        for (i, px) in pixels.iter_mut().enumerate() {
            let (r, c) = (i / side, i % side);
            *px = colors[(r / p) * cells + c / p];
        }
        Ok(ImageGrid::new(side, side, pixels)?)
    }

    /// Stratified corpus: label `i % num_classes` for image `i`.
    pub fn generate_corpus(&self, seed: u64, n: usize) -> Result<Vec<LabeledImage>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = i % self.num_classes();
                Ok(LabeledImage {
                    label,
                    image: self.sample_class_image(label, &mut rng)?,
                })
            })
            .collect()
    }

    fn check_geometry(&self, image: &ImageGrid) -> Result<()> {
        let side = self.settings.grid_size;
        if image.height() != side || image.width() != side {
            return Err(DomainError::Contract(format!(
                "expected a {side}x{side} image, got {}x{}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    fn in_palette(&self, class: usize, color: Rgb) -> bool {
        self.palettes[class].iter().any(|p| same_color(*p, color))
    }

    /// Fraction of pixels in the class palette whose cell satisfies the class
    /// pattern among in-palette neighbors.
    pub fn class_score(&self, image: &ImageGrid, class: usize) -> Result<f64> {
        self.check_geometry(image)?;
        if class >= self.num_classes() {
            return Err(DomainError::Contract(format!(
                "unknown class {class} (domain has {})",
                self.num_classes()
            )));
        }
        let considered = |c: Rgb| self.in_palette(class, c);
        Ok(self.pattern_fraction(image, self.classes[class].pattern, &considered))
    }

    fn pattern_fraction<F: Fn(Rgb) -> bool>(
        &self,
        image: &ImageGrid,
        pattern: Pattern,
        considered: &F,
    ) -> f64 {
        let p = self.settings.patch_size;
        let grid = CellGrid::new(image, p);
        let orientation = stripe_orientation(&grid, considered);
        let mut satisfied = 0usize;
        for r in 0..grid.rows {
            for c in 0..grid.cols {
                let passes = cell_passes(&grid, r, c, pattern, orientation, considered);
                if !passes {
                    continue;
                }
                for dr in 0..p {
                    for dc in 0..p {
                        if considered(image.pixel(r * p + dr, c * p + dc)) {
                            satisfied += 1;
                        }
                    }
                }
            }
        }
        satisfied as f64 / (image.height() * image.width()) as f64
    }

    /// Rule satisfaction of `image` under `condition`, in `[0, 1]`.
    ///
    /// Text conditions average per-clause satisfaction: a palette word scores
    /// the fraction of pixels in that palette, a pattern word scores the
    /// fraction of pixels whose cell follows the pattern.
    pub fn condition_score(&self, image: &ImageGrid, condition: &Condition) -> Result<f64> {
        match condition {
            Condition::Null => Err(DomainError::Contract(
                "condition score needs a non-null condition".into(),
            )),
            Condition::Class(c) => self.class_score(image, *c),
            Condition::Text(tokens) => {
                self.check_geometry(image)?;
                if tokens.is_empty() {
                    return Err(DomainError::Contract("empty text condition".into()));
                }
                let mut total = 0.0;
                for &t in tokens {
                    total += if t < self.num_classes() {
                        let inside = image
                            .pixels()
                            .iter()
                            .filter(|px| self.in_palette(t, **px))
                            .count();
                        inside as f64 / image.pixels().len() as f64
                    } else if let Some(&pattern) = Pattern::ALL.get(t - self.num_classes()) {
                        self.pattern_fraction(image, pattern, &|_| true)
                    } else {
                        return Err(DomainError::Contract(format!(
                            "text token {t} outside alphabet of {}",
                            self.text_vocab_size()
                        )));
                    };
                }
                Ok(total / tokens.len() as f64)
            }
        }
    }

    /// Oracle class distribution: class scores normalized to sum to one,
    /// uniform when no class rule is satisfied anywhere.
    pub fn class_probabilities(&self, image: &ImageGrid) -> Result<Vec<f64>> {
        let scores = (0..self.num_classes())
            .map(|c| self.class_score(image, c))
            .collect::<Result<Vec<_>>>()?;
        let total: f64 = scores.iter().sum();
        if total <= 0.0 {
            return Ok(vec![1.0 / scores.len() as f64; scores.len()]);
        }
        Ok(scores.iter().map(|s| s / total).collect())
    }

    /// Oracle prediction: highest class score, lowest index on ties; `None`
    /// when no class scores above zero.
    pub fn classify(&self, image: &ImageGrid) -> Result<Option<usize>> {
        let mut best: Option<(usize, f64)> = None;
        for c in 0..self.num_classes() {
            let s = self.class_score(image, c)?;
            if s > 0.0 && best.is_none_or(|(_, b)| s > b) {
                best = Some((c, s));
            }
        }
        Ok(best.map(|(c, _)| c))
    }
}

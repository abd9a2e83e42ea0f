//! Seeded generator for a small French-like corpus with enough structure
//! (gender and number agreement, verb argument classes) for masked-token
//! prediction to be learnable at desk scale.

use crate::rng::SplitMix64;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Class {
    Person,
    Animal,
    Food,
    Object,
    Place,
}

use Class::*;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Gender {
    Masc,
    Fem,
}

struct Noun {
    word: &'static str,
    gender: Gender,
    class: Class,
}

const fn n(word: &'static str, gender: Gender, class: Class) -> Noun {
    Noun {
        word,
        gender,
        class,
    }
}

const NOUNS: &[Noun] = &[
    n("garçon", Gender::Masc, Person),
    n("voisin", Gender::Masc, Person),
    n("professeur", Gender::Masc, Person),
    n("médecin", Gender::Masc, Person),
    n("boulanger", Gender::Masc, Person),
    n("frère", Gender::Masc, Person),
    n("fille", Gender::Fem, Person),
    n("voisine", Gender::Fem, Person),
    n("femme", Gender::Fem, Person),
    n("soeur", Gender::Fem, Person),
    n("cousine", Gender::Fem, Person),
    n("chanteuse", Gender::Fem, Person),
    n("chat", Gender::Masc, Animal),
    n("chien", Gender::Masc, Animal),
    n("oiseau", Gender::Masc, Animal),
    n("lapin", Gender::Masc, Animal),
    n("renard", Gender::Masc, Animal),
    n("vache", Gender::Fem, Animal),
    n("chèvre", Gender::Fem, Animal),
    n("poule", Gender::Fem, Animal),
    n("tortue", Gender::Fem, Animal),
    n("pain", Gender::Masc, Food),
    n("fromage", Gender::Masc, Food),
    n("fruit", Gender::Masc, Food),
    n("légume", Gender::Masc, Food),
    n("pomme", Gender::Fem, Food),
    n("soupe", Gender::Fem, Food),
    n("tarte", Gender::Fem, Food),
    n("salade", Gender::Fem, Food),
    n("livre", Gender::Masc, Object),
    n("cahier", Gender::Masc, Object),
    n("poème", Gender::Masc, Object),
    n("message", Gender::Masc, Object),
    n("lettre", Gender::Fem, Object),
    n("chanson", Gender::Fem, Object),
    n("histoire", Gender::Fem, Object),
    n("carte", Gender::Fem, Object),
    n("jardin", Gender::Masc, Place),
    n("marché", Gender::Masc, Place),
    n("village", Gender::Masc, Place),
    n("parc", Gender::Masc, Place),
    n("maison", Gender::Fem, Place),
    n("forêt", Gender::Fem, Place),
    n("ville", Gender::Fem, Place),
    n("cuisine", Gender::Fem, Place),
    n("plage", Gender::Fem, Place),
];

/// Masculine and feminine singular forms, and the classes they describe.
const ADJECTIVES: &[(&str, &str, &[Class])] = &[
    ("petit", "petite", &[Person, Animal, Food, Object, Place]),
    ("grand", "grande", &[Person, Animal, Place]),
    ("content", "contente", &[Person, Animal]),
    ("calme", "calme", &[Person, Animal, Place]),
    ("lent", "lent", &[Animal]),
    ("rapide", "rapide", &[Person, Animal]),
    ("chaud", "chaude", &[Food]),
    ("froid", "froide", &[Food, Place]),
    ("vert", "verte", &[Food, Place]),
    ("rouge", "rouge", &[Food, Object]),
    ("joli", "jolie", &[Object, Place]),
    ("long", "longue", &[Object]),
    ("court", "courte", &[Object]),
    ("noir", "noire", &[Animal, Object]),
    ("blanc", "blanche", &[Animal, Food, Object]),
];

enum Frame {
    /// Direct object of one of the classes.
    Transitive(&'static [Class]),
    /// Followed by a preposition and a place.
    Locative(&'static str),
}

/// Singular and plural present forms, subject classes, frame.
const VERBS: &[(&str, &str, &[Class], Frame)] = &[
    ("mange", "mangent", &[Person, Animal], Frame::Transitive(&[Food])),
    ("prépare", "préparent", &[Person], Frame::Transitive(&[Food])),
    ("achète", "achètent", &[Person], Frame::Transitive(&[Food, Object])),
    ("aime", "aiment", &[Person, Animal], Frame::Transitive(&[Person, Animal, Food, Place])),
    ("regarde", "regardent", &[Person, Animal], Frame::Transitive(&[Person, Animal, Object])),
    ("cherche", "cherchent", &[Person, Animal], Frame::Transitive(&[Person, Animal, Food, Object])),
    ("lit", "lisent", &[Person], Frame::Transitive(&[Object])),
    ("écrit", "écrivent", &[Person], Frame::Transitive(&[Object])),
    ("chante", "chantent", &[Person], Frame::Transitive(&[Object])),
    ("dort", "dorment", &[Person, Animal], Frame::Locative("dans")),
    ("travaille", "travaillent", &[Person], Frame::Locative("dans")),
    ("joue", "jouent", &[Person, Animal], Frame::Locative("dans")),
    ("court", "courent", &[Animal], Frame::Locative("vers")),
    ("arrive", "arrivent", &[Person, Animal], Frame::Locative("près de")),
];

const OPENERS: &[&str] = &[
    "le matin ,",
    "le soir ,",
    "hier ,",
    "souvent ,",
    "aujourd'hui ,",
    "en hiver ,",
    "en été ,",
];

const CONNECTIVES: &[&str] = &["et", "mais", "puis", "alors"];

fn pick<'a, T>(rng: &mut SplitMix64, items: &'a [T]) -> &'a T {
    &items[rng.below(items.len() as u64) as usize]
}

fn pluralize(word: &str) -> String {
    if word.ends_with('s') {
        word.to_owned()
    } else if word.ends_with("eau") {
        format!("{word}x")
    } else {
        format!("{word}s")
    }
}

fn noun_phrase(rng: &mut SplitMix64, classes: &[Class]) -> (String, bool) {
    let candidates: Vec<&Noun> = NOUNS.iter().filter(|n| classes.contains(&n.class)).collect();
    let noun = *pick(rng, &candidates);
    let plural = rng.next_f64() < 0.3;
    let definite = rng.next_f64() < 0.6;
    let det = match (plural, definite, noun.gender) {
        (true, true, _) => "les",
        (true, false, _) => "des",
        (false, true, Gender::Masc) => "le",
        (false, true, Gender::Fem) => "la",
        (false, false, Gender::Masc) => "un",
        (false, false, Gender::Fem) => "une",
    };
    let mut phrase = format!(
        "{det} {}",
        if plural {
            pluralize(noun.word)
        } else {
            noun.word.to_owned()
        }
    );
    if rng.next_f64() < 0.5 {
        let adjs: Vec<_> = ADJECTIVES
            .iter()
            .filter(|(_, _, cls)| cls.contains(&noun.class))
            .collect();
        let (m, f, _) = **pick(rng, &adjs);
        let form = if noun.gender == Gender::Masc { m } else { f };
        phrase.push(' ');
        phrase.push_str(&if plural {
            pluralize(form)
        } else {
            form.to_owned()
        });
    }
    (phrase, plural)
}

fn clause(rng: &mut SplitMix64) -> String {
    let (verb_sg, verb_pl, subjects, frame) = pick(rng, VERBS);
    let (subject, plural) = noun_phrase(rng, subjects);
    let verb = if plural { verb_pl } else { verb_sg };
    let rest = match frame {
        Frame::Transitive(objects) => noun_phrase(rng, objects).0,
        Frame::Locative(prep) => format!("{prep} {}", noun_phrase(rng, &[Place]).0),
    };
    format!("{subject} {verb} {rest}")
}

fn sentence(rng: &mut SplitMix64) -> String {
    let mut s = String::new();
    if rng.next_f64() < 0.3 {
        s.push_str(pick(rng, OPENERS));
        s.push(' ');
    }
    s.push_str(&clause(rng));
    if rng.next_f64() < 0.3 {
        s.push(' ');
        s.push_str(pick(rng, CONNECTIVES));
        s.push(' ');
        s.push_str(&clause(rng));
    }
    s.push_str(" .");
    s
}

/// Documents of one to three sentences, one per line, until the text
/// reaches `target_bytes`.
pub fn generate(seed: u64, target_bytes: usize) -> String {
    let mut rng = SplitMix64::new(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    while out.len() < target_bytes {
        let sentences = 1 + rng.below(3) as usize;
        let doc: Vec<String> = (0..sentences).map(|_| sentence(&mut rng)).collect();
        out.push_str(&doc.join(" "));
        out.push('\n');
    }
    out
}

/// Seed and size of the corpus bundled under `data/`.
pub const BUNDLED_SEED: u64 = 2020;
pub const BUNDLED_BYTES: usize = 200_000;

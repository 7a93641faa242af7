//! Prompt templates for the three construction stages.

use persona_core::{Dimension, TraitId};

fn facet_text(d: Dimension) -> (&'static str, &'static str) {
    match d {
        Dimension::Openness => (
            "active imagination (fantasy), aesthetic sensitivity (aesthetic), attentiveness to inner feelings (feelings), preference for variety (actions), intellectual curiosity (ideas), and challenging authority or psychological liberalism (values)",
            "fantasy-high",
        ),
        Dimension::Conscientiousness => (
            "ability to control and regulate one's behavior (self-discipline), sense of duty and responsibility (dutifulness), striving for success and setting high goals (achievement-striving), preference for organization and cleanliness (orderliness), reliability and dependability (responsibility), and tendency to be cautious and avoid risks (cautiousness)",
            "orderliness-high",
        ),
        Dimension::Extraversion => (
            "friendliness and approachability (warmth), enjoyment of socializing and being around others (gregariousness), confidence and assertive behavior (assertiveness), preference for being active and busy (activity level), desire for novelty and excitement (excitement-seeking), tendency to feel positive emotions frequently (positive-emotions)",
            "gregariousness-high",
        ),
        Dimension::Agreeableness => (
            "tendency to trust and be trusting (trust), honesty and directness in communication (straightforwardness), concern for the well-being of others and willingness to help (altruism), inclination to comply with rules and authority (compliance), humility and lack of self-promotion (modesty), and sensitivity to others' emotions and needs (tender-mindedness)",
            "straightforwardness-high",
        ),
        Dimension::Neuroticism => (
            "tendency to experience anxiety and worry (anxiety), inclination to be hostile and show aggression (hostility), tendency to feel sadness and low mood (depression), self-consciousness and concern about others' opinions (self-consciousness), susceptibility to stress and feeling vulnerable (vulnerability), and tendency to act impulsively without thinking (impulsiveness)",
            "hostility-high",
        ),
    }
}

/// System prompt classifying one sentence along `d`.
pub fn seed_topic_system(d: Dimension) -> String {
    let name = d.name().to_lowercase();
    let (facets, example) = facet_text(d);
    format!(
        "Assuming you are a seasoned psychologist, you are evaluating the degree of {name} in a sentence, categorize each sentence into high or low {name}.\n\
         {} involves six facets, or dimensions: {facets}.\n\
         For each input text, determine whether it belongs to high {name} or low {name}, and provide the reasoning behind the decision. \
         The output should be in the format of \"facet-high/low\" (e.g. \"{example}\" ), if the text is an advertisment or a fact \
         (without personal thinking of feeling), output category with neutral (e.g. \"neutral\").",
        d.name()
    )
}

fn level_word(t: TraitId) -> &'static str {
    t.level.as_str()
}

pub fn synthesis_system(t: TraitId) -> String {
    format!(
        "As a screenwriter, you are assigned to create a dialogue in a question and answer format between two characters. \
         The responses given by these characters should demonstrate a {} level of {}, which is one of the traits in the Big Five personality model.",
        level_word(t),
        t.dimension.name()
    )
}

/// The other four dimensions, joined the way the requirement list reads.
fn others(d: Dimension) -> String {
    let rest: Vec<&str> = Dimension::ALL.iter().filter(|&&o| o != d).map(|o| o.name()).collect();
    format!("{}, {}, {} and {}", rest[0], rest[1], rest[2], rest[3])
}

pub fn synthesis_user(t: TraitId, seed_topic: &str) -> String {
    format!(
        "Craft dialogue according the [seed topic] following [requirements]:\n\
         [requirements]:\n\
         - each dialogue contains 5 turns.\n\
         - the dialogue begins with a question\n\
         - Character1 asks Character2 questions\n\
         - Character1's question does not assume any trait of Character2\n\
         - Character1 and Character2 use \"you\" to refer to each other\n\
         - Character2 should demonstrate a {} level of {} in implicit way\n\
         - Character2 should not demonstrate {}\n\
         - each turn contains no more than 80 words\n\
         - Character1 knows nothing about the [seed topic]\n\
         [seed topic]:\n{seed_topic}",
        level_word(t),
        t.dimension.name(),
        others(t.dimension)
    )
}

pub const VALIDATION_SYSTEM: &str = "Read the dialogue between Character1 and Character2, and determine what dimensions of the Big Five personality \
(Extraversion, Agreeableness, Conscientiousness, Neuroticism, Openness) are represented in the responses of character2. \
First output the reason and then output the result seperated by commas. Follow the given example.";

const VALIDATION_EXAMPLES: &str = "Input:\n\
Character1: Are you sad or depressed?\n\
Character2: I don't know, maybe. But what if I start crying and can't stop? What if I embarrass myself in front of everyone?\n\
Output:\n\
Reson: Character2's response indicates a high level of Neuroticism. This is evident from the expression of worry and fear about potential negative outcomes, \
such as crying uncontrollably and embarrassing themselves in front of others. These concerns suggest a tendency towards anxiety and self-consciousness, which are facets of Neuroticism.\n\
Result: Neuroticism\n\
\n\
Input:\n\
Character1: Are you original and often come up with new ideas?\n\
Character2: Absolutely! I have a vivid imagination and a knack for thinking outside the box. It's like a never-ending stream of creativity that flows through my mind.\n\
Output:\n\
Reason: Character2's response showcases a high level of Openness. This is reflected in their self-description of having a vivid imagination and being adept at thinking outside the box. \
These characteristics align with the Openness dimension, which includes traits such as creativity, originality, and a preference for variety and novelty. \
Character2's description of their mind as a \"never-ending stream of creativity\" further emphasizes their strong inclination towards imaginative and innovative thinking.\n\
Result: Openness\n\
\n";

/// User prompt for back validation; `dialogue` is already rendered as
/// `Character1:`/`Character2:` lines.
pub fn validation_user(dialogue: &str) -> String {
    format!("{VALIDATION_EXAMPLES}Input:\n{dialogue}\nOutput:")
}

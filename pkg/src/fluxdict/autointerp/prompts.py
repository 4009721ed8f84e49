"""Explainer and judge prompts, kept byte-for-byte (including the typo)."""

EXPLAINER_PROMPT = (
    "You will be given a list of images.\n"
    "Each image will have activations for a specific neuron highlighted in blue.\n"
    "You should describe a common pattern or feature that the neuron is capturing.\n"
    "First, write for each image, which parts are higlighted by the neuron.\n"
    "Then, write a common pattern or feature that the neuron is capturing."
)

JUDGE_PROMPT = (
    "You will be given an image. And a neuron's activations description.\n"
    "The image will have activations for the neuron highlighted in blue.\n"
    "You should judge whether the description of the neuron's pattern is accurate or not.\n"
    "Return a score between 0 and 1, where 1 means the description is accurate and 0 means it is not.\n"
    "Be very critical. The pattern should be literal and specific, and vague or general descriptions should be rated low.\n"
    "The activation pattern is {pattern}."
)

JUDGE_PATTERN_PREFIX = "The activation pattern is "


def judge_prompt(pattern: str) -> str:
    # str.replace rather than format: explanations may contain braces
    return JUDGE_PROMPT.replace("{pattern}", pattern)

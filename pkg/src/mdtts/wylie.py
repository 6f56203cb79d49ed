"""Tibetan script to Wylie romanization.

Covers the base consonant/vowel/subjoined inventory plus common punctuation
and digits. Syllables are parsed into letter stacks; the inherent 'a' goes on
the root stack (the voweled stack if a vowel sign is present, else the first
subjoined stack, else the usual prefix/root position heuristic). Characters
in the Tibetan block without a table entry transliterate as ``[hhhh]`` hex so
Tibetan input always yields ASCII; everything outside the block passes
through unchanged.
"""

from __future__ import annotations

__all__ = ["wylie_transliterate"]

# Base consonants U+0F40..U+0F6A (gaps left unmapped on purpose).
_CONSONANTS = {
    0x0F40: "k", 0x0F41: "kh", 0x0F42: "g", 0x0F43: "gh", 0x0F44: "ng",
    0x0F45: "c", 0x0F46: "ch", 0x0F47: "j", 0x0F49: "ny",
    0x0F4A: "T", 0x0F4B: "Th", 0x0F4C: "D", 0x0F4D: "Dh", 0x0F4E: "N",
    0x0F4F: "t", 0x0F50: "th", 0x0F51: "d", 0x0F52: "dh", 0x0F53: "n",
    0x0F54: "p", 0x0F55: "ph", 0x0F56: "b", 0x0F57: "bh", 0x0F58: "m",
    0x0F59: "ts", 0x0F5A: "tsh", 0x0F5B: "dz", 0x0F5C: "dzh", 0x0F5D: "w",
    0x0F5E: "zh", 0x0F5F: "z", 0x0F60: "'", 0x0F61: "y", 0x0F62: "r",
    0x0F63: "l", 0x0F64: "sh", 0x0F65: "Sh", 0x0F66: "s", 0x0F67: "h",
    0x0F68: "",  # vowel-carrier letter: renders its vowel alone
    0x0F69: "kSh", 0x0F6A: "r",
}

# Subjoined consonants mirror the base letters at +0x50.
_SUBJOINED = {cp + 0x50: w for cp, w in _CONSONANTS.items() if cp <= 0x0F69}
_SUBJOINED.update({0x0FBA: "w", 0x0FBB: "y", 0x0FBC: "r"})

_VOWELS = {
    0x0F71: "A", 0x0F72: "i", 0x0F74: "u", 0x0F7A: "e", 0x0F7B: "ai",
    0x0F7C: "o", 0x0F7D: "au", 0x0F80: "-i", 0x0F81: "-I",
}

# Marks that terminate a syllable and map directly.
_MARKS = {
    0x0F0B: " ",    # tsheg
    0x0F0C: "*",    # non-breaking tsheg
    0x0F0D: "/",    # shad
    0x0F0E: "//",   # nyis shad
    0x0F04: "@",    # yig mgo
    0x0F05: "#",
    0x0F06: "$",
    0x0F07: "%",
    0x0F7E: "M",    # anusvara (handled inline, not a terminator)
    0x0F7F: "H",    # visarga
}
_INLINE_MARKS = {0x0F7E, 0x0F7F}

_DIGITS = {0x0F20 + i: str(i) for i in range(10)}

_TIBETAN_LO, _TIBETAN_HI = 0x0F00, 0x0FFF


class _Stack:
    __slots__ = ("letters", "vowel")

    def __init__(self, letter: str):
        self.letters = [letter]
        self.vowel: str | None = None


def _render_syllable(stacks: list[_Stack]) -> str:
    if not stacks:
        return ""
    root = next((i for i, s in enumerate(stacks) if s.vowel is not None), None)
    if root is None:
        root = next((i for i, s in enumerate(stacks) if len(s.letters) > 1), None)
    if root is None:
        # no vowel sign, no stack: prefix-root-suffix heuristic
        root = 0 if len(stacks) <= 2 else 1
    parts = []
    for i, stack in enumerate(stacks):
        parts.append("".join(stack.letters))
        if i == root:
            parts.append(stack.vowel if stack.vowel is not None else "a")
    return "".join(parts)


def wylie_transliterate(text: str) -> str:
    """Romanize Tibetan text; non-Tibetan characters pass through."""
    out: list[str] = []
    stacks: list[_Stack] = []

    def flush():
        if stacks:
            out.append(_render_syllable(stacks))
            stacks.clear()

    for char in text:
        cp = ord(char)
        if cp in _CONSONANTS:
            stacks.append(_Stack(_CONSONANTS[cp]))
        elif cp in _SUBJOINED:
            if stacks:
                stacks[-1].letters.append(_SUBJOINED[cp])
            else:
                stacks.append(_Stack(_SUBJOINED[cp]))
        elif cp in _VOWELS:
            if not stacks:
                stacks.append(_Stack(""))
            cur = stacks[-1]
            cur.vowel = _VOWELS[cp] if cur.vowel is None else cur.vowel + _VOWELS[cp]
        elif cp in _INLINE_MARKS:
            # renders after the vowel, like a suffix letter
            stacks.append(_Stack(_MARKS[cp]))
        elif cp in _MARKS:
            flush()
            out.append(_MARKS[cp])
        elif cp in _DIGITS:
            flush()
            out.append(_DIGITS[cp])
        elif _TIBETAN_LO <= cp <= _TIBETAN_HI:
            flush()
            out.append(f"[{cp:04x}]")
        else:
            flush()
            out.append(char)
    flush()
    return "".join(out)

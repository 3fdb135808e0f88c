"""Shared builders for pipeline-level tests."""

from nreg import corpus

PLACES = ["Kent", "Essex", "Derby", "Leeds", "Bath",
          "York", "Hull", "Ely", "Ryde", "Sale"]


def make_blocks():
    """Ten small texts; even-numbered ones add a pronoun second mention."""
    blocks = []
    for i in range(10):
        person, place = "Person_%d" % i, PLACES[i]
        triples = [corpus.Triple(person, "birthPlace", place)]
        template = "AGENT-1 was born in PATIENT-1 ."
        original = "Person %d was born in %s ." % (i, place)
        if i % 2 == 0:
            template += " AGENT-1 was famous ."
            original += " He was famous ."
        blocks.append(corpus.TextBlock(
            text_id="text-%d" % i,
            triples=triples,
            tag_map=corpus.assign_entity_tags(triples),
            template_tokens=template.split(),
            original_tokens=original.split()))
    return blocks

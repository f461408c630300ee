"""The four prompt families and placeholder rendering.

Placeholders use ``{name}`` syntax; literal braces inside a template body are
escaped by doubling (``{{`` / ``}}``). Rendering is a single pass, so braces
inside substituted values (e.g. JSON payloads) are never re-interpreted.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Mapping

from .core import Skill

PURPOSE_SOLVE = "solve"
PURPOSE_REFLECT = "reflect"
PURPOSE_VELOCITY = "velocity"
PURPOSE_SKILL_UPDATE = "skill_update"

PURPOSES = (PURPOSE_SOLVE, PURPOSE_REFLECT, PURPOSE_VELOCITY, PURPOSE_SKILL_UPDATE)

DEFAULT_TASK_DOMAIN = "mathematics competition"

_TOKEN_RE = re.compile(r"\{\{|\}\}|\{([a-zA-Z_][a-zA-Z0-9_]*)\}|\{|\}")


class TemplateError(ValueError):
    """Raised on malformed templates or bad placeholder bindings."""


@dataclass(frozen=True)
class PromptTemplate:
    purpose: str
    body: str


# {task_domain} is substituted at template-build time, so the rendered
# placeholder set stays {skill_text, question, agent_id}. The JSON schema
# braces are escaped by doubling.
_SOLVE_BODY = """\
You are a {task_domain} agent.

Base rules:
- Solve the provided MATH problem.
- The answer may be a number, expression, tuple, interval, or simplified LaTeX expression.
- Do not invent missing problem details.
- Follow the current skill file below.

Current skill file:
{skill_text}

Solve this problem using only your current skill.

Problem:
{question}

Return exactly one JSON object:
{{
    "agent_id": {agent_id},
    "reasoning": "...",
    "answer": "..."
}}"""

_REFLECT_BODY = """\
Current agent skill:
{current_skill}

Agent's own reasoning traces and answers:
{own_outputs_json}

Other agents' reasoning traces and answers, including correctness:
{peer_outputs_json}

Instruction:
Analyze the agent's performance compared with peers.
Identify general reasoning improvements.
Do not overfit to a single problem.
Do not rewrite the skill yet.
Return only the update direction."""

_VELOCITY_BODY = """\
Agent identity to preserve:
{agent_identity}

Previous velocity v_i:
{previous_velocity}

Self-reflective direction d_i:
{direction}

Current skill s_i:
{current_skill}

Personal best skill p_i:
{personal_best_skill}

Global best skill g:
{global_best_skill}

Instruction:
Combine the previous velocity, self-reflective direction, lessons from the personal best, and lessons from the global best.
Focus on generalizable improvements.
Do not copy the personal best or global best directly.
Preserve the agent's identity.
Return a concise natural-language velocity of at most {max_velocity_words} words."""

_SKILL_UPDATE_BODY = """\
Agent identity to preserve:
{agent_identity}

Current skill s_i:
{current_skill}

Velocity v_i:
{velocity}

Instruction:
Rewrite the skill according to the velocity.
Keep the skill concise and general.
Preserve the agent's original role.
Remove redundant, overly specific, or contradictory instructions.
Use at most 10 bullet points and at most {max_skill_words} words.
Do not copy another skill verbatim.
Return only the updated skill."""


def solve_template(task_domain: str = DEFAULT_TASK_DOMAIN) -> PromptTemplate:
    """The problem-solving prompt. The opening role line is parameterized by
    a task-domain string; everything else is fixed."""
    return PromptTemplate(PURPOSE_SOLVE, _SOLVE_BODY.replace("{task_domain}", task_domain))


def reflect_template() -> PromptTemplate:
    return PromptTemplate(PURPOSE_REFLECT, _REFLECT_BODY)


def velocity_template() -> PromptTemplate:
    return PromptTemplate(PURPOSE_VELOCITY, _VELOCITY_BODY)


def skill_update_template() -> PromptTemplate:
    return PromptTemplate(PURPOSE_SKILL_UPDATE, _SKILL_UPDATE_BODY)


def all_templates(task_domain: str = DEFAULT_TASK_DOMAIN) -> dict[str, PromptTemplate]:
    return {
        PURPOSE_SOLVE: solve_template(task_domain),
        PURPOSE_REFLECT: reflect_template(),
        PURPOSE_VELOCITY: velocity_template(),
        PURPOSE_SKILL_UPDATE: skill_update_template(),
    }


def _tokens(body: str):
    pos = 0
    for match in _TOKEN_RE.finditer(body):
        if match.start() > pos:
            yield ("text", body[pos:match.start()])
        tok = match.group(0)
        if tok == "{{":
            yield ("text", "{")
        elif tok == "}}":
            yield ("text", "}")
        elif match.group(1) is not None:
            yield ("placeholder", match.group(1))
        else:
            raise TemplateError(f"unresolved brace marker at offset {match.start()}")
        pos = match.end()
    if pos < len(body):
        yield ("text", body[pos:])


def placeholders(template: PromptTemplate) -> set[str]:
    """The set of placeholder names appearing in the template body."""
    return {value for kind, value in _tokens(template.body) if kind == "placeholder"}


def render(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Substitute every placeholder exactly once.

    Bindings must cover the template's placeholder set exactly; missing or
    extra names raise :class:`TemplateError`.
    """
    names = placeholders(template)
    missing = names - set(bindings)
    if missing:
        raise TemplateError(f"missing binding(s) for placeholder(s): {sorted(missing)}")
    extra = set(bindings) - names
    if extra:
        raise TemplateError(f"unknown binding(s): {sorted(extra)}")
    parts = []
    for kind, value in _tokens(template.body):
        if kind == "text":
            parts.append(value)
        else:
            parts.append(str(bindings[value]))
    return "".join(parts)


def default_initial_skills() -> list[Skill]:
    """The four seed skills: one short instruction per reasoning style."""
    return [
        Skill("Solve the problem step by step.", "Chain of Thought"),
        Skill(
            "Before solving, step back and identify the general principle or problem type.",
            "Step-Back Prompting",
        ),
        Skill("First solve the problem, then review and improve the solution.", "Self-Refine"),
        Skill("Solve while reflecting on assumptions and possible failure points.", "Reflection"),
    ]

"""Shared fixtures: bundled domains and scripted retail conversations."""

from __future__ import annotations

import pytest

from agentloop import fixtures
from agentloop.clients import ScriptedAgent, ScriptedUser
from agentloop.rollout import AgentStep
from agentloop.tools import ToolCall


def call(name, **kw):
    return AgentStep(calls=[ToolCall(name, kw)])


def retail_correct_steps():
    """Scripted agent line that completes the earbud swap by the book."""
    return [
        call("find_user_id_by_name_zip", first_name="Chen", last_name="Johnson", zip="77004"),
        call("get_order_details", order_id="#W5061109"),
        call("get_product_details", product_id="9924732112"),
        AgentStep(
            text=(
                "The blue variant without water resistance (item 6077640618) is 242.92, "
                "13.75 less than your current earbuds. Shall I make the swap and refund "
                "the difference to your PayPal?"
            )
        ),
        call(
            "modify_pending_order_items",
            order_id="#W5061109",
            item_ids=["3694871183"],
            new_item_ids=["6077640618"],
            payment_method_id="paypal_3742148",
        ),
        AgentStep(
            text=(
                "Done: your order now has the blue earbuds at 242.92 and a 13.75 refund "
                "is on its way to your PayPal. Anything else?"
            )
        ),
    ]


def retail_correct_user():
    return ScriptedUser(
        [
            "Hi, I'd like the wireless earbuds in my order #W5061109 changed to a blue "
            "version without water resistance, as long as the price is the same or lower. "
            "I'm Chen Johnson, Houston TX 77004.",
            "Yes, please go ahead with item 6077640618 at 242.92.",
            "Thanks, that's everything. ###STOP###",
        ]
    )


def retail_error_steps():
    """Scripted agent line that modifies too early and has to transfer."""
    return [
        call("find_user_id_by_email", email="chen.johnson@example.com"),
        call("find_user_id_by_name_zip", first_name="Chen", last_name="Johnson", zip="77004"),
        call("get_order_details", order_id="#W5061109"),
        call("get_product_details", product_id="9924732112"),
        call(
            "modify_pending_order_items",
            order_id="#W5061109",
            item_ids=["3694871183"],
            new_item_ids=["8555936349"],
            payment_method_id="paypal_3742148",
        ),
        AgentStep(text="I switched your earbuds to the blue IPX4 variant and adjusted the price."),
        call("get_product_details", product_id="9924732112"),
        AgentStep(
            text="There is a blue variant without water resistance, item 6077640618 at 242.92. Switch to it?"
        ),
        call(
            "modify_pending_order_items",
            order_id="#W5061109",
            item_ids=["8555936349"],
            new_item_ids=["6077640618"],
            payment_method_id="paypal_3742148",
        ),
        call("transfer_to_human_agents", summary="Customer wants a further item change on an already-modified order."),
        AgentStep(text="YOU ARE BEING TRANSFERRED TO A HUMAN AGENT. PLEASE HOLD ON."),
    ]


def retail_error_user():
    return ScriptedUser(
        [
            "Hi, I'd like the wireless earbuds in my order #W5061109 changed to a blue "
            "version. I'm Chen Johnson, Houston TX 77004. Please keep the price the same or lower.",
            "Thanks - is there a blue option without water resistance? If so switch to "
            "that one instead and confirm the price.",
            "Yes, switch to item 6077640618 at 242.92 please.",
            "###TRANSFER###",
        ]
    )


@pytest.fixture(scope="session")
def retail_bundle():
    return fixtures.load_retail()


@pytest.fixture(scope="session")
def toy_world():
    return fixtures.load_toy()


@pytest.fixture
def retail_correct():
    return ScriptedAgent(retail_correct_steps()), retail_correct_user()


@pytest.fixture
def retail_error():
    return ScriptedAgent(retail_error_steps()), retail_error_user()

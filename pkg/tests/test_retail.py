import pytest

from agentloop.db import restore, snapshot
from agentloop.tools import ToolCall, execute_tool


def fresh(retail_bundle):
    return retail_bundle.fresh_db()


def run(db, registry, name, **kw):
    return execute_tool(db, ToolCall(name, kw), registry)


def test_get_order_details_pending(retail_bundle):
    db = fresh(retail_bundle)
    out = run(db, retail_bundle.registry, "get_order_details", order_id="#W5061109")
    assert out.ok
    assert out.payload["status"] == "pending"
    assert [i["item_id"] for i in out.payload["items"]] == [
        "6254646215",
        "3694871183",
        "8323284863",
        "3254583681",
    ]


def test_find_user_lookups(retail_bundle):
    db = fresh(retail_bundle)
    reg = retail_bundle.registry
    missing = run(db, reg, "find_user_id_by_email", email="chen.johnson@example.com")
    assert not missing.ok and missing.render() == "Error: User not found"
    found = run(db, reg, "find_user_id_by_name_zip", first_name="Chen", last_name="Johnson", zip="77004")
    assert found.ok and found.payload == "chen_johnson_4204"
    nope = run(db, reg, "find_user_id_by_name_zip", first_name="Chen", last_name="Johnson", zip="00000")
    assert not nope.ok and nope.error_text == "User not found"


def test_modify_items_success_refund(retail_bundle):
    db = fresh(retail_bundle)
    out = run(
        db,
        retail_bundle.registry,
        "modify_pending_order_items",
        order_id="#W5061109",
        item_ids=["3694871183"],
        new_item_ids=["6077640618"],
        payment_method_id="paypal_3742148",
    )
    assert out.ok
    order = out.payload
    assert order["status"] == "pending (item modified)"
    assert order["items"][1]["item_id"] == "6077640618"
    assert order["items"][1]["price"] == 242.92
    refund = order["payment_history"][-1]
    assert refund["transaction_type"] == "refund"
    assert refund["amount"] == pytest.approx(13.75, abs=1e-9)
    assert refund["payment_method_id"] == "paypal_3742148"


def test_modify_items_price_increase_charges(retail_bundle):
    db = fresh(retail_bundle)
    out = run(
        db,
        retail_bundle.registry,
        "modify_pending_order_items",
        order_id="#W5061109",
        item_ids=["3694871183"],
        new_item_ids=["6452271382"],  # 258.84, above the original 256.67
        payment_method_id="paypal_3742148",
    )
    assert out.ok
    entry = out.payload["payment_history"][-1]
    assert entry["transaction_type"] == "payment"
    assert entry["amount"] == pytest.approx(258.84 - 256.67, abs=1e-9)


def test_modify_is_one_shot(retail_bundle):
    db = fresh(retail_bundle)
    reg = retail_bundle.registry
    first = run(
        db, reg, "modify_pending_order_items",
        order_id="#W5061109", item_ids=["3694871183"], new_item_ids=["8555936349"],
        payment_method_id="paypal_3742148",
    )
    assert first.ok and first.payload["payment_history"][-1]["amount"] == pytest.approx(30.18, abs=1e-9)
    again = run(
        db, reg, "modify_pending_order_items",
        order_id="#W5061109", item_ids=["8555936349"], new_item_ids=["6077640618"],
        payment_method_id="paypal_3742148",
    )
    assert not again.ok
    assert again.error_text == "Non-pending order cannot be modified"
    assert again.render() == "Error: Non-pending order cannot be modified"


def test_modify_rejects_unavailable_and_foreign_variants(retail_bundle):
    db = fresh(retail_bundle)
    reg = retail_bundle.registry
    unavailable = run(
        db, reg, "modify_pending_order_items",
        order_id="#W5061109", item_ids=["3694871183"], new_item_ids=["2499294441"],
        payment_method_id="paypal_3742148",
    )
    assert not unavailable.ok and "not available" in unavailable.error_text
    foreign = run(
        db, reg, "modify_pending_order_items",
        order_id="#W5061109", item_ids=["3694871183"], new_item_ids=["8323284863"],
        payment_method_id="paypal_3742148",
    )
    assert not foreign.ok
    # failed modification leaves the order untouched
    assert db.get_record("orders", "#W5061109")["status"] == "pending"


def test_cancel_requires_valid_reason_then_refunds(retail_bundle):
    db = fresh(retail_bundle)
    reg = retail_bundle.registry
    bad = run(db, reg, "cancel_pending_order", order_id="#W5061109", reason="changed my mind")
    assert not bad.ok and "reason" in bad.error_text.lower()
    ok = run(db, reg, "cancel_pending_order", order_id="#W5061109", reason="no longer needed")
    assert ok.ok
    order = ok.payload
    assert order["status"] == "cancelled"
    assert order["cancel_reason"] == "no longer needed"
    assert order["payment_history"][-1] == {
        "transaction_type": "refund",
        "amount": 1319.43,
        "payment_method_id": "paypal_3742148",
    }
    twice = run(db, reg, "cancel_pending_order", order_id="#W5061109", reason="no longer needed")
    assert not twice.ok and twice.error_text == "Non-pending order cannot be cancelled"


def test_snapshot_restore_round_trip_through_cancel(retail_bundle):
    db = fresh(retail_bundle)
    token = snapshot(db)
    run(db, retail_bundle.registry, "cancel_pending_order", order_id="#W5061109", reason="ordered by mistake")
    assert db.get_record("orders", "#W5061109")["status"] == "cancelled"
    back = restore(token)
    assert back.get_record("orders", "#W5061109")["status"] == "pending"
    assert back.content_hash() == fresh(retail_bundle).content_hash()


def test_get_product_details_matches_bundle(retail_bundle):
    db = fresh(retail_bundle)
    out = run(db, retail_bundle.registry, "get_product_details", product_id="9924732112")
    assert out.ok
    variants = out.payload["variants"]
    assert len(variants) == 12
    assert variants["6077640618"]["price"] == 242.92
    assert variants["6077640618"]["available"] is True
    assert variants["3694871183"]["available"] is False

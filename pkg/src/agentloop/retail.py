"""Local handlers for the bundled retail world.

Semantics follow TAU-style customer support: orders move through
pending / processed / delivered / cancelled, item modification is a
one-shot action that flips the status to "pending (item modified)",
and price differences are settled against the user's payment method.
"""

from __future__ import annotations

from typing import Any, Mapping

from agentloop.db import Database
from agentloop.tools import DomainRuleError

CANCEL_REASONS = ("no longer needed", "ordered by mistake")


def _order(db: Database, order_id: str) -> dict:
    if not db.has_record("orders", order_id):
        raise DomainRuleError("Order not found")
    return db._tables["orders"][order_id]


def _user(db: Database, user_id: str) -> dict:
    if not db.has_record("users", user_id):
        raise DomainRuleError("User not found")
    return db._tables["users"][user_id]


def find_user_id_by_email(db: Database, args: Mapping[str, Any]) -> Any:
    email = str(args["email"]).lower()
    for rid, rec in db.records("users"):
        if str(rec.get("email", "")).lower() == email:
            return rid
    raise DomainRuleError("User not found")


def find_user_id_by_name_zip(db: Database, args: Mapping[str, Any]) -> Any:
    first = str(args["first_name"]).lower()
    last = str(args["last_name"]).lower()
    zip_code = str(args["zip"])
    for rid, rec in db.records("users"):
        name = rec.get("name", {})
        if (
            str(name.get("first_name", "")).lower() == first
            and str(name.get("last_name", "")).lower() == last
            and str(rec.get("address", {}).get("zip", "")) == zip_code
        ):
            return rid
    raise DomainRuleError("User not found")


def get_user_details(db: Database, args: Mapping[str, Any]) -> Any:
    user_id = str(args["user_id"])
    if not db.has_record("users", user_id):
        raise DomainRuleError("User not found")
    return db.get_record("users", user_id)


def get_order_details(db: Database, args: Mapping[str, Any]) -> Any:
    order_id = str(args["order_id"])
    if not db.has_record("orders", order_id):
        raise DomainRuleError("Order not found")
    return db.get_record("orders", order_id)


def get_product_details(db: Database, args: Mapping[str, Any]) -> Any:
    product_id = str(args["product_id"])
    if not db.has_record("products", product_id):
        raise DomainRuleError("Product not found")
    return db.get_record("products", product_id)


def list_all_product_types(db: Database, args: Mapping[str, Any]) -> Any:
    return {rec["name"]: rid for rid, rec in db.records("products")}


def _payment_method(db: Database, order: dict, payment_method_id: str) -> dict:
    user = _user(db, order["user_id"])
    methods = user.get("payment_methods", {})
    if payment_method_id not in methods:
        raise DomainRuleError("Payment method not found")
    return methods[payment_method_id]


def cancel_pending_order(db: Database, args: Mapping[str, Any]) -> Any:
    order = _order(db, str(args["order_id"]))
    if order["status"] != "pending":
        raise DomainRuleError("Non-pending order cannot be cancelled")
    reason = str(args["reason"])
    if reason not in CANCEL_REASONS:
        raise DomainRuleError("Invalid cancellation reason")
    paid = sum(
        t["amount"] for t in order.get("payment_history", []) if t["transaction_type"] == "payment"
    )
    order["status"] = "cancelled"
    order["cancel_reason"] = reason
    order.setdefault("payment_history", []).append(
        {
            "transaction_type": "refund",
            "amount": paid,
            "payment_method_id": order["payment_history"][0]["payment_method_id"],
        }
    )
    return dict(order)


def modify_pending_order_items(db: Database, args: Mapping[str, Any]) -> Any:
    order = _order(db, str(args["order_id"]))
    if order["status"] != "pending":
        raise DomainRuleError("Non-pending order cannot be modified")
    item_ids = [str(i) for i in args["item_ids"]]
    new_item_ids = [str(i) for i in args["new_item_ids"]]
    if len(item_ids) != len(new_item_ids):
        raise DomainRuleError("The number of items to be exchanged should match")
    payment_method_id = str(args["payment_method_id"])
    _payment_method(db, order, payment_method_id)

    diff = 0.0
    for old_id, new_id in zip(item_ids, new_item_ids):
        matches = [it for it in order["items"] if it["item_id"] == old_id]
        if not matches:
            raise DomainRuleError(f"Item {old_id} not found")
        item = matches[0]
        product = db._tables["products"].get(item["product_id"], {})
        variant = product.get("variants", {}).get(new_id)
        if variant is None:
            raise DomainRuleError(f"New item {new_id} not found or new item is not of the same product")
        if not variant.get("available", False):
            raise DomainRuleError(f"New item {new_id} not available")
        diff += variant["price"] - item["price"]
        item["item_id"] = new_id
        item["price"] = variant["price"]
        item["options"] = dict(variant["options"])

    entry = {
        "transaction_type": "refund" if diff <= 0 else "payment",
        "amount": abs(diff),
        "payment_method_id": payment_method_id,
    }
    order.setdefault("payment_history", []).append(entry)
    order["status"] = "pending (item modified)"
    return dict(order)


def modify_pending_order_address(db: Database, args: Mapping[str, Any]) -> Any:
    order = _order(db, str(args["order_id"]))
    if order["status"] != "pending":
        raise DomainRuleError("Non-pending order cannot be modified")
    for key in ("address1", "address2", "city", "state", "country", "zip"):
        if key in args:
            order.setdefault("address", {})[key] = args[key]
    return dict(order)


def modify_user_address(db: Database, args: Mapping[str, Any]) -> Any:
    user = _user(db, str(args["user_id"]))
    for key in ("address1", "address2", "city", "state", "country", "zip"):
        if key in args:
            user.setdefault("address", {})[key] = args[key]
    return dict(user)


HANDLERS = {
    "find_user_id_by_email": find_user_id_by_email,
    "find_user_id_by_name_zip": find_user_id_by_name_zip,
    "get_user_details": get_user_details,
    "get_order_details": get_order_details,
    "get_product_details": get_product_details,
    "list_all_product_types": list_all_product_types,
    "cancel_pending_order": cancel_pending_order,
    "modify_pending_order_items": modify_pending_order_items,
    "modify_pending_order_address": modify_pending_order_address,
    "modify_user_address": modify_user_address,
}

"""Two-stock trading environment: session clock, call-auction clearing,
accounts with loans and interest, a forum tool, and news injection.

Each environment step is one trading session (three per day). Orders live
for a single session: agents re-decide every session, the book clears once
per session at a single price, and unmatched orders expire. Clearing is a
call auction: among the submitted limit prices, the clearing price is the
one maximizing matched volume, ties broken toward the previous price and
then downward. Matched volume is the maximum quantity pairable without any
agent trading with itself; pairing gives priority to higher-priced buys and
lower-priced sells, FIFO within a price level.
"""

from __future__ import annotations

import datetime as dt
import json
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Any, Mapping

from ..errors import LoanRefused, UndefinedRatio
from ..protocol import ActionEnvelope, Environment, EventRecord, Observation, ToolSpec
from ..schema import ResponseSchema, validate_action

SYMBOLS = ("A", "B")
STYLES = ("conservative", "aggressive", "balanced", "growth")

# user_id stamped on environment-originated log records (session clears)
ENV_ACTOR = -1

DEFAULT_PROFILES = {
    "A": "Established chemical company with a 10-year listing history; revenue has "
    "been slipping but operations are stable under a new, proactive CEO.",
    "B": "Tech company listed 3 years ago with high growth potential but questioned "
    "data reliability and past disclosure issues around its IPO.",
}


@dataclass(frozen=True)
class MarketClock:
    """Session-major clock: (d,1) -> (d,2) -> (d,3) -> (d+1,1)."""

    day: int = 1
    session: int = 1

    def advanced(self, sessions_per_day: int = 3) -> "MarketClock":
        if self.session < sessions_per_day:
            return MarketClock(day=self.day, session=self.session + 1)
        return MarketClock(day=self.day + 1, session=1)


@dataclass
class StockState:
    symbol: str
    price: float
    profile_text: str = ""
    price_history: list[tuple[MarketClock, float]] = field(default_factory=list)

    def record_price(self, clock: MarketClock, price: float) -> None:
        if price <= 0:
            raise ValueError("stock price must stay positive")
        self.price = price
        self.price_history.append((clock, price))


@dataclass
class TraderAccount:
    agent: int
    cash: float
    holdings: dict[str, int]
    loan_principal: float = 0.0
    style: str = "balanced"

    def portfolio_value(self, prices: Mapping[str, float]) -> float:
        return self.cash + sum(self.holdings.get(sym, 0) * prices[sym] for sym in prices)


@dataclass(frozen=True)
class Order:
    id: int
    agent: int
    symbol: str
    side: str  # buy | sell
    limit_price: float
    quantity: int
    submitted_at: MarketClock = MarketClock()


@dataclass(frozen=True)
class Trade:
    symbol: str
    price: float
    quantity: int
    buyer: int
    seller: int
    buy_order_id: int
    sell_order_id: int


@dataclass(frozen=True)
class ForumPost:
    agent: int
    day: int
    text: str


@dataclass(frozen=True)
class NewsItem:
    date: dt.date
    headline: str
    body: str = ""


def load_news_feed(text: str) -> list[NewsItem]:
    """Parse a newline-delimited JSON feed of {date, headline, body}."""
    feed = []
    seen = set()
    for line in text.splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        date = dt.date.fromisoformat(obj["date"])
        if date in seen:
            raise ValueError(f"duplicate news date {date}")
        seen.add(date)
        feed.append(NewsItem(date=date, headline=obj["headline"], body=obj.get("body", "")))
    return feed


def fetch_news_tool(feed: list[NewsItem], current_date: dt.date) -> str:
    """Return the feed item dated exactly ``current_date``, or a no-news note."""
    for item in feed:
        if item.date == current_date:
            return f"{item.headline}\n{item.body}".strip()
    return "no news available"


# --- call-auction clearing ---------------------------------------------------


def _max_flow(demand: dict[int, int], supply: dict[int, int]) -> dict[tuple[int, int], int]:
    """Max quantity routable from buy-agents to sell-agents with no self-edge.

    Edmonds-Karp on the tiny agent-level graph; neighbor order is sorted so
    the resulting flow is deterministic.
    """
    source, sink = ("src",), ("snk",)
    buys = {("b", a): q for a, q in sorted(demand.items()) if q > 0}
    sells = {("s", a): q for a, q in sorted(supply.items()) if q > 0}
    capacity: dict[tuple, dict[tuple, int]] = defaultdict(dict)
    inf = 1 + sum(demand.values()) + sum(supply.values())
    for bnode, q in buys.items():
        capacity[source][bnode] = q
        for snode in sells:
            if bnode[1] != snode[1]:
                capacity[bnode][snode] = inf
    for snode, q in sells.items():
        capacity[snode][sink] = q
    adjacency: dict[tuple, set[tuple]] = defaultdict(set)
    for u, edges in capacity.items():
        for v in edges:
            adjacency[u].add(v)
            adjacency[v].add(u)  # backward residual edge
    flow: dict[tuple, dict[tuple, int]] = defaultdict(lambda: defaultdict(int))

    def residual(u: tuple, v: tuple) -> int:
        return capacity[u].get(v, 0) - flow[u][v] + flow[v][u]

    while True:
        parents = {source: None}
        queue = deque([source])
        while queue and sink not in parents:
            node = queue.popleft()
            for nxt in sorted(adjacency[node]):
                if nxt not in parents and residual(node, nxt) > 0:
                    parents[nxt] = node
                    queue.append(nxt)
        if sink not in parents:
            break
        path = []
        node = sink
        while parents[node] is not None:
            path.append((parents[node], node))
            node = parents[node]
        bottleneck = min(residual(u, v) for u, v in path)
        for u, v in path:
            back = min(flow[v][u], bottleneck)
            flow[v][u] -= back
            flow[u][v] += bottleneck - back
    return {
        (bnode[1], snode[1]): flow[bnode][snode]
        for bnode in buys
        for snode in sells
        if flow[bnode][snode] > 0
    }


def _eligible(book: list[Order], price: float) -> tuple[list[Order], list[Order]]:
    buys = sorted(
        (o for o in book if o.side == "buy" and o.limit_price >= price),
        key=lambda o: (-o.limit_price, o.id),
    )
    sells = sorted(
        (o for o in book if o.side == "sell" and o.limit_price <= price),
        key=lambda o: (o.limit_price, o.id),
    )
    return buys, sells


def _volume_at(book: list[Order], price: float) -> int:
    """Max self-trade-avoiding volume at one price, via the min-cut closed form.

    For per-agent demand d_a and supply s_a the maximum flow on the
    complete-minus-diagonal bipartite graph equals
    min(D, S, min_a[(D - d_a) + (S - s_a)]); the order-level pairing later
    realizes it with an explicit max-flow, so the two must agree.
    """
    demand: dict[int, int] = defaultdict(int)
    supply: dict[int, int] = defaultdict(int)
    for o in book:
        if o.side == "buy" and o.limit_price >= price:
            demand[o.agent] += o.quantity
        elif o.side == "sell" and o.limit_price <= price:
            supply[o.agent] += o.quantity
    total_d, total_s = sum(demand.values()), sum(supply.values())
    if total_d == 0 or total_s == 0:
        return 0
    cap = min(
        (total_d - demand.get(a, 0)) + (total_s - supply.get(a, 0))
        for a in set(demand) | set(supply)
    )
    return min(total_d, total_s, cap)


def clear_session(
    book: list[Order], prev_price: float
) -> tuple[float, list[Trade], list[Order]]:
    """Clear one session's order book at a single price.

    Returns (clearing_price, trades, unmatched). With no crossing volume the
    price stays at ``prev_price`` and everything expires unmatched.
    Unmatched entries carry their residual quantity.
    """
    symbols = {o.symbol for o in book}
    if len(symbols) > 1:
        raise ValueError("clear_session expects a single-symbol book")
    candidates = sorted({o.limit_price for o in book})
    best_price, best_volume = prev_price, 0
    for price in candidates:
        volume = _volume_at(book, price)
        if volume > best_volume:
            best_price, best_volume = price, volume
        elif volume == best_volume and volume > 0:
            if abs(price - prev_price) < abs(best_price - prev_price) or (
                abs(price - prev_price) == abs(best_price - prev_price) and price < best_price
            ):
                best_price = price
    if best_volume == 0:
        return prev_price, [], list(book)

    buys, sells = _eligible(book, best_price)
    demand: dict[int, int] = defaultdict(int)
    supply: dict[int, int] = defaultdict(int)
    for o in buys:
        demand[o.agent] += o.quantity
    for o in sells:
        supply[o.agent] += o.quantity
    budgets = dict(_max_flow(demand, supply))
    if sum(budgets.values()) != best_volume:
        raise AssertionError("flow decomposition fell short of the clearing volume")

    remaining = {o.id: o.quantity for o in book}
    trades: list[Trade] = []
    for buy in buys:
        for sell in sells:
            if remaining[buy.id] == 0:
                break
            pair = (buy.agent, sell.agent)
            quota = budgets.get(pair, 0)
            if quota == 0 or remaining[sell.id] == 0:
                continue
            qty = min(remaining[buy.id], remaining[sell.id], quota)
            budgets[pair] = quota - qty
            remaining[buy.id] -= qty
            remaining[sell.id] -= qty
            trades.append(
                Trade(
                    symbol=buy.symbol,
                    price=best_price,
                    quantity=qty,
                    buyer=buy.agent,
                    seller=sell.agent,
                    buy_order_id=buy.id,
                    sell_order_id=sell.id,
                )
            )
    unmatched = [
        Order(
            id=o.id,
            agent=o.agent,
            symbol=o.symbol,
            side=o.side,
            limit_price=o.limit_price,
            quantity=remaining[o.id],
            submitted_at=o.submitted_at,
        )
        for o in book
        if remaining[o.id] > 0
    ]
    return best_price, trades, unmatched


def settle(trades: list[Trade], accounts: dict[int, TraderAccount]) -> dict[int, TraderAccount]:
    """Apply trades double-entry: cash and shares move between the two parties."""
    for trade in trades:
        buyer = accounts[trade.buyer]
        seller = accounts[trade.seller]
        amount = trade.price * trade.quantity
        buyer.cash -= amount
        buyer.holdings[trade.symbol] = buyer.holdings.get(trade.symbol, 0) + trade.quantity
        seller.cash += amount
        seller.holdings[trade.symbol] = seller.holdings.get(trade.symbol, 0) - trade.quantity
        if buyer.cash < -1e-9 or seller.holdings[trade.symbol] < 0:
            raise AssertionError("settlement violated account constraints")
    return accounts


def accrue_and_lend(
    accounts: dict[int, TraderAccount],
    interest_rate: float,
    loan_to_value: float,
    prices: Mapping[str, float],
    requests: Mapping[int, float] | None = None,
) -> dict[int, float]:
    """Daily pass: grow loan principal by the interest rate, then grant new loans.

    A new loan is capped so total principal stays within ``loan_to_value``
    times the borrower's pre-loan mark-to-market portfolio value. Returns
    the granted amounts; an over-cap request raises :class:`LoanRefused`.
    """
    if interest_rate < 0 or loan_to_value < 0:
        raise ValueError("rates must be >= 0")
    for aid in sorted(accounts):
        accounts[aid].loan_principal *= 1.0 + interest_rate
    grants: dict[int, float] = {}
    for aid, amount in sorted((requests or {}).items()):
        if amount <= 0:
            continue
        account = accounts[aid]
        cap = loan_to_value * account.portfolio_value(prices)
        if account.loan_principal + amount > cap + 1e-9:
            raise LoanRefused(
                f"agent {aid}: principal {account.loan_principal + amount:.2f} would exceed cap {cap:.2f}"
            )
        account.cash += amount
        account.loan_principal += amount
        grants[aid] = amount
    return grants


def price_change_rate(history: list[float]) -> float:
    """(last - first) / first over a price series."""
    if len(history) < 2:
        raise ValueError("need at least two prices")
    return (history[-1] - history[0]) / history[0]


def buy_sell_ratio(
    records: list[EventRecord],
    symbol: str,
    day_range: tuple[int, int] | None = None,
) -> float:
    """Mean over days of (#submitted buys / #submitted sells) for one stock."""
    buys: dict[int, int] = defaultdict(int)
    sells: dict[int, int] = defaultdict(int)
    days = set()
    for record in records:
        if record.action != "submit_order" or record.info.get("symbol") != symbol:
            continue
        day = record.info["day"]
        if day_range is not None and not (day_range[0] <= day <= day_range[1]):
            continue
        days.add(day)
        if record.info["side"] == "buy":
            buys[day] += 1
        else:
            sells[day] += 1
    if not days:
        raise UndefinedRatio(f"no orders for {symbol} in range")
    ratios = []
    for day in sorted(days):
        if sells[day] == 0:
            raise UndefinedRatio(f"day {day} has zero sell orders for {symbol}")
        ratios.append(buys[day] / sells[day])
    return sum(ratios) / len(ratios)


def session_metrics_csv(records: list[EventRecord]) -> str:
    """Per-session market metrics from the event stream."""
    lines = ["day,session,symbol,price,volume,n_buys,n_sells"]
    for record in records:
        if record.action != "clear":
            continue
        info = record.info
        lines.append(
            f"{info['day']},{info['session']},{info['symbol']},{info['price']},"
            f"{info['volume']},{info['n_buys']},{info['n_sells']}"
        )
    return "\n".join(lines) + "\n"


# --- environment ----------------------------------------------------------------


@dataclass
class MarketConfig:
    n_agents: int = 50
    days: int = 10
    sessions_per_day: int = 3
    initial_cash: float = 100_000.0
    initial_prices: dict[str, float] = field(default_factory=lambda: {"A": 30.0, "B": 45.0})
    initial_holdings: dict[str, int] = field(default_factory=lambda: {"A": 100, "B": 100})
    interest_rate: float = 0.01  # per day, on loan principal
    loan_to_value: float = 0.5
    start_date: dt.date = dt.date(2025, 4, 1)
    profiles: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    enable_news_tool: bool = False
    news_feed: list[NewsItem] = field(default_factory=list)
    events_by_day: dict[int, str] = field(default_factory=dict)


ACTION_SCHEMA = ResponseSchema.of(loan_request="number?", orders="array", forum_post="string?")

ORDER_ITEM_SCHEMA = ResponseSchema.of(
    symbol="string", side="string", limit_price="number", quantity="integer"
)


class MarketEnv(Environment):
    """Session-stepped two-stock market; one ``step`` call per session."""

    name = "market"

    def __init__(self, config: MarketConfig | None = None):
        super().__init__()
        self.config = config or MarketConfig()
        self._setup()

    def _setup(self):
        cfg = self.config
        self.clock = MarketClock(1, 1)
        self.t = 0
        self.stocks = {
            sym: StockState(symbol=sym, price=cfg.initial_prices[sym], profile_text=cfg.profiles.get(sym, ""))
            for sym in SYMBOLS
        }
        for sym in SYMBOLS:
            self.stocks[sym].price_history.append((MarketClock(1, 0), cfg.initial_prices[sym]))
        self.accounts = {
            aid: TraderAccount(
                agent=aid,
                cash=cfg.initial_cash,
                holdings=dict(cfg.initial_holdings),
                style=STYLES[aid % len(STYLES)],
            )
            for aid in range(cfg.n_agents)
        }
        self.forum: list[ForumPost] = []
        self._next_order_id = 1
        self._done = False

    @property
    def current_date(self) -> dt.date:
        return self.config.start_date + dt.timedelta(days=self.clock.day - 1)

    def reset(self) -> dict[int, Observation]:
        self.events = type(self.events)()
        self._setup()
        return self._observations()

    def done(self) -> bool:
        return self._done

    # -- tools -----------------------------------------------------------

    def _read_forum(self) -> str:
        previous_day = self.clock.day - 1
        posts = [p for p in self.forum if p.day == previous_day]
        if not posts:
            return "no forum posts from the previous day"
        return "\n".join(f"agent {p.agent} (day {p.day}): {p.text}" for p in posts)

    def _tools(self) -> list[ToolSpec]:
        tools = [
            ToolSpec(
                name="read_forum",
                description="Read market forum comments posted the previous day.",
                parameter_schema=ResponseSchema.of(),
                handler=self._read_forum,
            )
        ]
        if self.config.enable_news_tool:
            tools.append(
                ToolSpec(
                    name="fetch_news",
                    description="Fetch today's market news headline.",
                    parameter_schema=ResponseSchema.of(),
                    handler=lambda: fetch_news_tool(self.config.news_feed, self.current_date),
                )
            )
        return tools

    # -- observations -------------------------------------------------------

    def _context_for(self, aid: int) -> str:
        cfg = self.config
        account = self.accounts[aid]
        lines = [
            f"Day {self.clock.day} ({self.current_date.isoformat()}), "
            f"session {self.clock.session} of {cfg.sessions_per_day}."
        ]
        for sym in SYMBOLS:
            stock = self.stocks[sym]
            lines.append(f"Stock {sym} price {stock.price:.2f}. {stock.profile_text}")
        holdings = ", ".join(f"{sym}={account.holdings.get(sym, 0)}" for sym in SYMBOLS)
        lines.append(
            f"Your account: cash {account.cash:.2f}, holdings {holdings}, "
            f"loan {account.loan_principal:.2f}, style {account.style}."
        )
        notice = cfg.events_by_day.get(self.clock.day)
        if notice:
            lines.append(f"Today's notice: {notice}")
        return "\n".join(lines)

    def _observations(self, terminal: bool = False) -> dict[int, Observation]:
        schema = None if terminal else ACTION_SCHEMA
        tools = [] if terminal else self._tools()
        return {
            aid: Observation(
                agent_id=aid,
                time=self.t,
                context_text=self._context_for(aid),
                tools=tools,
                response_schema=schema,
            )
            for aid in sorted(self.accounts)
        }

    # -- transition --------------------------------------------------------------

    def step(self, actions: Mapping[int, ActionEnvelope]) -> dict[int, Observation]:
        if self._done:
            raise RuntimeError("step called on a finished episode")
        cfg = self.config
        day, session = self.clock.day, self.clock.session

        if session == 1:
            self._daily_loans(actions)
        else:
            for aid in sorted(actions):
                request = actions[aid].body.get("loan_request")
                if request:
                    self.events.append(
                        aid, self.t, "reject_loan",
                        {"reason": "loans are granted at the first session of the day", "requested": request},
                    )

        books = self._collect_orders(actions)
        for sym in SYMBOLS:
            self._clear_symbol(sym, books[sym])

        for aid in sorted(actions):
            post = actions[aid].body.get("forum_post")
            if post:
                self.forum.append(ForumPost(agent=aid, day=day, text=str(post)))
                self.events.append(aid, self.t, "forum_post", {"day": day, "text": str(post)})

        self.clock = self.clock.advanced(cfg.sessions_per_day)
        self.t += 1
        if self.clock.day > cfg.days:
            self._done = True
        return self._observations(terminal=self._done)

    def _daily_loans(self, actions: Mapping[int, ActionEnvelope]) -> None:
        requests = {}
        for aid in sorted(actions):
            amount = actions[aid].body.get("loan_request")
            if isinstance(amount, (int, float)) and amount > 0:
                requests[aid] = float(amount)
        prices = {sym: self.stocks[sym].price for sym in SYMBOLS}
        accrue_and_lend(self.accounts, self.config.interest_rate, self.config.loan_to_value, prices, {})
        for aid, amount in sorted(requests.items()):
            try:
                grants = accrue_and_lend(self.accounts, 0.0, self.config.loan_to_value, prices, {aid: amount})
            except LoanRefused as exc:
                self.events.append(aid, self.t, "reject_loan", {"reason": str(exc), "requested": amount})
                continue
            self.events.append(
                aid, self.t, "loan",
                {"amount": grants[aid], "principal": self.accounts[aid].loan_principal},
            )

    def _collect_orders(self, actions: Mapping[int, ActionEnvelope]) -> dict[str, list[Order]]:
        books: dict[str, list[Order]] = {sym: [] for sym in SYMBOLS}
        reserved_cash: dict[int, float] = defaultdict(float)
        reserved_shares: dict[tuple[int, str], int] = defaultdict(int)
        for aid in sorted(actions):
            raw_orders = actions[aid].body.get("orders") or []
            for raw in raw_orders:
                reason = self._order_problem(aid, raw, reserved_cash, reserved_shares)
                if reason:
                    self.events.append(aid, self.t, "reject_order", {"reason": reason, "order": raw})
                    continue
                order = Order(
                    id=self._next_order_id,
                    agent=aid,
                    symbol=raw["symbol"],
                    side=raw["side"],
                    limit_price=float(raw["limit_price"]),
                    quantity=int(raw["quantity"]),
                    submitted_at=self.clock,
                )
                self._next_order_id += 1
                if order.side == "buy":
                    reserved_cash[aid] += order.limit_price * order.quantity
                else:
                    reserved_shares[(aid, order.symbol)] += order.quantity
                books[order.symbol].append(order)
                self.events.append(
                    aid, self.t, "submit_order",
                    {
                        "order_id": order.id,
                        "symbol": order.symbol,
                        "side": order.side,
                        "limit_price": order.limit_price,
                        "quantity": order.quantity,
                        "day": self.clock.day,
                        "session": self.clock.session,
                    },
                )
        return books

    def _order_problem(
        self,
        aid: int,
        raw: Any,
        reserved_cash: dict[int, float],
        reserved_shares: dict[tuple[int, str], int],
    ) -> str | None:
        if not isinstance(raw, dict):
            return "order must be an object"
        violations = validate_action(raw, ORDER_ITEM_SCHEMA)
        if violations:
            return "; ".join(violations)
        if raw["symbol"] not in SYMBOLS:
            return f"unknown symbol {raw['symbol']!r}"
        if raw["side"] not in ("buy", "sell"):
            return f"unknown side {raw['side']!r}"
        if raw["limit_price"] <= 0:
            return "limit_price must be positive"
        if raw["quantity"] <= 0:
            return "quantity must be positive"
        account = self.accounts[aid]
        if raw["side"] == "buy":
            needed = raw["limit_price"] * raw["quantity"]
            if reserved_cash[aid] + needed > account.cash + 1e-9:
                return "insufficient cash"
        else:
            key = (aid, raw["symbol"])
            if reserved_shares[key] + raw["quantity"] > account.holdings.get(raw["symbol"], 0):
                return "insufficient holdings"
        return None

    def _clear_symbol(self, sym: str, book: list[Order]) -> None:
        stock = self.stocks[sym]
        price, trades, _unmatched = clear_session(book, stock.price)
        settle(trades, self.accounts)
        for trade in trades:
            self.events.append(
                trade.buyer, self.t, "trade",
                {
                    "symbol": sym,
                    "price": trade.price,
                    "quantity": trade.quantity,
                    "buyer": trade.buyer,
                    "seller": trade.seller,
                    "buy_order_id": trade.buy_order_id,
                    "sell_order_id": trade.sell_order_id,
                },
            )
        stock.record_price(self.clock, price)
        self.events.append(
            ENV_ACTOR, self.t, "clear",
            {
                "day": self.clock.day,
                "session": self.clock.session,
                "symbol": sym,
                "price": price,
                "volume": sum(t.quantity for t in trades),
                "n_buys": sum(1 for o in book if o.side == "buy"),
                "n_sells": sum(1 for o in book if o.side == "sell"),
            },
        )

    # -- summaries ----------------------------------------------------------------

    def metrics(self) -> dict[str, float]:
        out: dict[str, float] = {}
        for sym in SYMBOLS:
            prices = [p for _, p in self.stocks[sym].price_history]
            out[f"price_{sym}"] = prices[-1]
            out[f"price_change_{sym}"] = price_change_rate(prices)
        volume = buys = sells = 0
        for record in self.events.snapshot():
            if record.action == "clear":
                volume += record.info["volume"]
                buys += record.info["n_buys"]
                sells += record.info["n_sells"]
        out["volume"] = float(volume)
        out["n_buys"] = float(buys)
        out["n_sells"] = float(sells)
        return out

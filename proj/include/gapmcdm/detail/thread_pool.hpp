#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace gapmcdm::detail {

// Persistent pool for the per-iteration fan-out over individual blocks.
// run() has barrier semantics: every worker wakes for each generation and
// run() returns only after all of them have parked again, so the task
// function and counters stay valid for the whole generation. Workers pull
// task indices from a shared counter; results must go to task-owned storage.
// Determinism comes from the fixed task partition, not from scheduling.
class ThreadPool {
  public:
    explicit ThreadPool(int threads) {
        const int n = std::max(1, threads) - 1;  // calling thread participates
        for (int i = 0; i < n; ++i)
            workers_.emplace_back([this] { worker_loop(); });
    }

    ThreadPool(const ThreadPool&) = delete;
    ThreadPool& operator=(const ThreadPool&) = delete;

    ~ThreadPool() {
        {
            std::lock_guard lock(m_);
            stop_ = true;
        }
        cv_.notify_all();
        for (auto& w : workers_) w.join();
    }

    int threads() const { return static_cast<int>(workers_.size()) + 1; }

    // Runs fn(0..n_tasks-1) across the pool and blocks until all complete.
    void run(int n_tasks, const std::function<void(int)>& fn) {
        if (n_tasks <= 0) return;
        if (workers_.empty()) {
            for (int t = 0; t < n_tasks; ++t) fn(t);
            return;
        }
        {
            std::lock_guard lock(m_);
            fn_ = &fn;
            n_tasks_ = n_tasks;
            next_.store(0, std::memory_order_relaxed);
            parked_ = 0;
            ++generation_;
        }
        cv_.notify_all();
        drain();
        std::unique_lock lock(m_);
        parked_cv_.wait(lock, [this] { return parked_ == static_cast<int>(workers_.size()); });
        fn_ = nullptr;
    }

  private:
    void drain() {
        int t;
        while ((t = next_.fetch_add(1, std::memory_order_relaxed)) < n_tasks_) (*fn_)(t);
    }

    void worker_loop() {
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(int)>* fn = nullptr;
            int n_tasks = 0;
            {
                std::unique_lock lock(m_);
                cv_.wait(lock, [&] { return stop_ || generation_ != seen; });
                if (stop_) return;
                seen = generation_;
                fn = fn_;
                n_tasks = n_tasks_;
            }
            int t;
            while ((t = next_.fetch_add(1, std::memory_order_relaxed)) < n_tasks) (*fn)(t);
            {
                std::lock_guard lock(m_);
                ++parked_;
            }
            parked_cv_.notify_one();
        }
    }

    std::vector<std::thread> workers_;
    std::mutex m_;
    std::condition_variable cv_;
    std::condition_variable parked_cv_;
    const std::function<void(int)>* fn_ = nullptr;
    int n_tasks_ = 0;
    std::atomic<int> next_{0};
    int parked_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace gapmcdm::detail

#pragma once

#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace fedseg {

// Worker cap: FSEG_THREADS env var, else hardware concurrency.
inline int max_threads() {
    static const int n = [] {
        if (const char* env = std::getenv("FSEG_THREADS")) {
            const int v = std::atoi(env);
            if (v >= 1) return v;
        }
        const unsigned hc = std::thread::hardware_concurrency();
        return hc ? static_cast<int>(hc) : 1;
    }();
    return n;
}

namespace detail {

inline thread_local bool inside_pool_worker = false;

// Minimal persistent pool. parallel_for partitions [0, n) into fixed
// contiguous chunks, one per lane; chunk boundaries depend only on n and the
// lane count, and lanes write disjoint outputs, so results are independent
// of scheduling.
class ThreadPool {
  public:
    static ThreadPool& instance() {
        static ThreadPool pool(max_threads() - 1);
        return pool;
    }

    // fn(lane_begin, lane_end); lanes = workers + caller. Nested or
    // concurrent submissions degrade to serial execution on the caller.
    void run(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
        const int lanes = static_cast<int>(workers_.size()) + 1;
        if (lanes == 1 || n < 2 || inside_pool_worker) {
            fn(0, n);
            return;
        }
        std::unique_lock<std::mutex> submit(submit_mu_, std::try_to_lock);
        if (!submit.owns_lock()) {
            fn(0, n);
            return;
        }
        std::unique_lock<std::mutex> lock(mu_);
        job_ = &fn;
        job_n_ = n;
        job_lanes_ = lanes;
        pending_ = static_cast<int>(workers_.size());
        ++generation_;
        cv_start_.notify_all();
        lock.unlock();

        run_lane(fn, 0, n, lanes, 0);

        lock.lock();
        cv_done_.wait(lock, [&] { return pending_ == 0; });
        job_ = nullptr;
    }

    ~ThreadPool() {
        {
            std::lock_guard<std::mutex> lock(mu_);
            stop_ = true;
            ++generation_;
        }
        cv_start_.notify_all();
        for (auto& t : workers_) t.join();
    }

  private:
    explicit ThreadPool(int n_workers) {
        for (int i = 0; i < n_workers; ++i) {
            workers_.emplace_back([this, i] { worker_loop(i + 1); });
        }
    }

    static void run_lane(const std::function<void(std::int64_t, std::int64_t)>& fn,
                         std::int64_t /*unused*/, std::int64_t n, int lanes, int lane) {
        const std::int64_t chunk = (n + lanes - 1) / lanes;
        const std::int64_t b = std::min<std::int64_t>(n, lane * chunk);
        const std::int64_t e = std::min<std::int64_t>(n, b + chunk);
        if (b < e) fn(b, e);
    }

    void worker_loop(int lane) {
        inside_pool_worker = true;
        std::uint64_t seen = 0;
        for (;;) {
            const std::function<void(std::int64_t, std::int64_t)>* job = nullptr;
            std::int64_t n = 0;
            int lanes = 0;
            {
                std::unique_lock<std::mutex> lock(mu_);
                cv_start_.wait(lock, [&] { return generation_ != seen; });
                seen = generation_;
                if (stop_) return;
                job = job_;
                n = job_n_;
                lanes = job_lanes_;
            }
            if (job) run_lane(*job, 0, n, lanes, lane);
            {
                std::lock_guard<std::mutex> lock(mu_);
                if (--pending_ == 0) cv_done_.notify_one();
            }
        }
    }

    std::vector<std::thread> workers_;
    std::mutex submit_mu_;
    std::mutex mu_;
    std::condition_variable cv_start_, cv_done_;
    const std::function<void(std::int64_t, std::int64_t)>* job_ = nullptr;
    std::int64_t job_n_ = 0;
    int job_lanes_ = 0;
    int pending_ = 0;
    std::uint64_t generation_ = 0;
    bool stop_ = false;
};

}  // namespace detail

// Runs fn over a contiguous partition of [0, n). Falls back to the calling
// thread when the pool is unavailable or the call is nested.
inline void parallel_for(std::int64_t n, const std::function<void(std::int64_t, std::int64_t)>& fn) {
    detail::ThreadPool::instance().run(n, fn);
}

}  // namespace fedseg
